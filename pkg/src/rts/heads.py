"""Embedding network, log-scale head, ArcFace scoring and the four head variants."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Graph
from .stochastic import TEMPERATURE_FLOOR, RngStream

Z_CLAMP = 8.0


class Variant(str, enum.Enum):
    PLAIN = "plain"
    FIXED = "fixed"
    RELAXED = "relaxed"
    RTS = "rts"

    @property
    def has_uncertainty(self) -> bool:
        return self in (Variant.RELAXED, Variant.RTS)


@dataclass
class ModelParams:
    """All trainable arrays plus the head variant.

    Shared trunk: ``h = tanh(... tanh(x w1 + b1) ... w_k + b_k)``.
    ``f``: ``normalize(h wf + bf)``; ``g``: ``h wg + bg`` (log-scales, zero
    width for plain/fixed heads). ``centers`` are the (C, d_y) class centers,
    kept unit-norm by the trainer.
    """

    tensors: dict[str, np.ndarray]
    variant: Variant = Variant.RTS
    dof: int = 16
    t0: float = 1.0

    def __getattr__(self, name: str) -> np.ndarray:
        tensors = self.__dict__.get("tensors", {})
        if name in tensors:
            return tensors[name]
        raise AttributeError(name)

    @property
    def depth(self) -> int:
        return sum(1 for k in self.tensors if k[0] == "w" and k[1:].isdigit())

    @property
    def d_x(self) -> int:
        return self.w1.shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.tensors[f"w{i}"].shape[1] for i in range(1, self.depth + 1))

    @property
    def d_y(self) -> int:
        return self.wf.shape[1]

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def g_width(self) -> int:
        return self.wg.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> ModelParams:
        merged = {k: np.array(arrays.get(k, v), dtype=np.float64) for k, v in self.tensors.items()}
        return replace(self, tensors=merged)

    def copy(self) -> ModelParams:
        return self.with_arrays(self.tensors)


def param_names(depth: int) -> tuple[str, ...]:
    """Canonical array order; checkpoints and optimizer state follow it."""
    trunk = tuple(n for i in range(1, depth + 1) for n in (f"w{i}", f"b{i}"))
    return trunk + ("wf", "bf", "wg", "bg", "centers")


def g_width_for(variant: Variant, dof: int) -> int:
    if variant is Variant.RTS:
        if dof < 3:
            raise ValueError(f"RTS needs dof >= 3, got {dof}")
        return dof
    return 1 if variant is Variant.RELAXED else 0


def normalize_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def init_params(rng: RngStream, d_x: int, hidden, d_y: int, num_classes: int,
                variant: Variant | str = Variant.RTS, dof: int = 16, t0: float = 1.0) -> ModelParams:
    """Glorot-style init for the trunk and f, unit-norm random centers, zeros for g.

    ``hidden`` is one width or a sequence of trunk widths.
    """
    variant = Variant(variant)
    if variant is Variant.FIXED and t0 <= 0:
        raise ValueError("fixed temperature must be positive")
    widths = (int(hidden),) if np.ndim(hidden) == 0 else tuple(int(w) for w in hidden)
    if not widths:
        raise ValueError("need at least one trunk layer")
    tensors: dict[str, np.ndarray] = {}
    fan_in = d_x
    for i, w in enumerate(widths, start=1):
        tensors[f"w{i}"] = rng.normal((fan_in, w)) * math.sqrt(2.0 / (fan_in + w))
        tensors[f"b{i}"] = np.zeros(w)
        fan_in = w
    tensors["wf"] = rng.normal((fan_in, d_y)) * math.sqrt(2.0 / (fan_in + d_y))
    tensors["bf"] = np.zeros(d_y)
    width = g_width_for(variant, dof)
    tensors["wg"] = np.zeros((fan_in, width))
    tensors["bg"] = np.zeros(width)
    tensors["centers"] = normalize_rows(rng.normal((num_classes, d_y)))
    return ModelParams(tensors=tensors, variant=variant, dof=dof, t0=float(t0))


def _check_input(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_x:
        raise ValueError(f"expected input dim {params.d_x}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    return x


def hidden_features(params: ModelParams, x) -> np.ndarray:
    h = _check_input(params, x)
    for i in range(1, params.depth + 1):
        h = np.tanh(h @ params.tensors[f"w{i}"] + params.tensors[f"b{i}"])
    return h


def embed(params: ModelParams, x) -> np.ndarray:
    """Unit-norm embedding for one input ``(d_x,)`` or a batch ``(n, d_x)``."""
    e = hidden_features(params, x) @ params.wf + params.bf
    return normalize_rows(e)


def log_scale(params: ModelParams, x) -> np.ndarray:
    """Clamped log-scales ``z``; ``exp(z)`` is the temperature scale ``v``."""
    if not params.variant.has_uncertainty:
        raise ValueError(f"{params.variant.value} head has no log-scale output")
    z = hidden_features(params, x) @ params.wg + params.bg
    return np.clip(z, -Z_CLAMP, Z_CLAMP)


def arcface_scores(y, label: int, centers, gamma: float, margin: float) -> np.ndarray:
    """Additive angular margin scores for one embedding (0-based label)."""
    y = np.asarray(y, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if not 0 <= label < centers.shape[0]:
        raise IndexError(f"label {label} out of range for {centers.shape[0]} classes")
    if margin < 0 or gamma <= 0:
        raise ValueError("need margin >= 0 and gamma > 0")
    cos = centers @ y
    out = gamma * cos
    if margin != 0.0:
        theta = math.acos(min(max(cos[label], -1.0), 1.0))
        out[label] = gamma * math.cos(theta + margin)
    return out


def final_logits(scores, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    return np.asarray(scores, dtype=np.float64) / t


@dataclass
class ForwardNodes:
    """Node ids of one batched forward pass."""

    leaves: dict[str, int]
    embedding: int
    scores: int
    logits: int
    log_scales: int | None = None
    temperature: int | None = None
    extra: dict[str, int] = field(default_factory=dict)


def param_leaves(g: Graph, params: ModelParams) -> dict[str, int]:
    return {name: g.param(arr) for name, arr in params.arrays().items()}


def build_forward(g: Graph, leaves: dict[str, int], params: ModelParams, x: np.ndarray,
                  labels: np.ndarray, gamma: float, margin: float,
                  eps: np.ndarray | None = None) -> ForwardNodes:
    """Add the batched head to ``g``.

    ``eps`` are the frozen standard-normal draws for RTS, shape ``(batch, dof)``.
    """
    variant = params.variant
    n = x.shape[0]
    h = g.const(x)
    for i in range(1, params.depth + 1):
        h = g.tanh(g.add(g.matmul(h, leaves[f"w{i}"]), leaves[f"b{i}"]))
    y = g.l2_normalize(g.add(g.matmul(h, leaves["wf"]), leaves["bf"]))

    cos = g.matmul(y, g.transpose(leaves["centers"]))
    if margin != 0.0:
        target = g.select_index(cos, labels)
        shifted = g.cos(g.add(g.acos(target), g.const(margin)))
        delta = g.reshape(g.sub(shifted, target), (n, 1))
        onehot = np.zeros(g.value(cos).shape)
        onehot[np.arange(n), labels] = 1.0
        cos = g.add(cos, g.mul(g.const(onehot), delta))
    scores = g.scale(cos, gamma)

    z = t = None
    if variant is Variant.PLAIN:
        logits = scores
    elif variant is Variant.FIXED:
        logits = g.div(scores, g.const(params.t0))
    else:
        z = g.clip(g.add(g.matmul(h, leaves["wg"]), leaves["bg"]), -Z_CLAMP, Z_CLAMP,
                   straight_through=True)
        if variant is Variant.RELAXED:
            t = g.exp(z)
        else:
            if eps is None or eps.shape != (n, params.dof):
                raise ValueError(f"RTS forward needs eps of shape {(n, params.dof)}")
            weighted = g.mul(g.exp(z), g.const(eps * eps))
            raw = g.div(g.sum(weighted, axis=1), g.const(params.dof - 2.0))
            t = g.reshape(g.clip(raw, TEMPERATURE_FLOOR, np.inf), (n, 1))
        logits = g.div(scores, t)
    return ForwardNodes(leaves=leaves, embedding=y, scores=scores, logits=logits,
                        log_scales=z, temperature=t)
