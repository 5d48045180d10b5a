"""SGD training of the head variants, with learning-rate and margin schedules
and per-epoch uncertainty logging on frozen probe cohorts."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import heads
from .datasynth import OOD_LABEL, Dataset
from .diffcore import Graph
from .heads import ModelParams, Variant
from .losses import LossBreakdown, cross_entropy_node, kl_gamma_node, total_loss
from .stochastic import RngStream, softmax

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
SCORE_AGGREGATIONS = ("mean", "max", "harmonic")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, logs: list):
        super().__init__(message)
        self.last_good = last_good
        self.logs = logs


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: str = "rts"
    dof: int = 16
    lam: float = 10.0
    gamma: float = 30.0
    m_final: float = 0.5
    dynamic_margin: bool = True
    t0: float = 1.0
    epochs: int = 32
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (20, 28)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: tuple[int, ...] = (128, 128)
    d_y: int = 16
    score_agg: str = "mean"
    probe_size: int = 200
    grad_clip: float | None = 5.0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.hidden = (int(self.hidden),) if np.ndim(self.hidden) == 0 else tuple(int(w) for w in self.hidden)
        self.validate()

    def validate(self) -> None:
        Variant(self.variant)
        if self.variant == Variant.RTS.value and self.dof < 3:
            raise ValueError("dof must be >= 3")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0 <= self.m_final < math.pi:
            raise ValueError("m_final must be in [0, pi)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.t0 <= 0:
            raise ValueError("t0 must be > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 when set")
        if self.score_agg not in SCORE_AGGREGATIONS:
            raise ValueError(f"score_agg must be one of {SCORE_AGGREGATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EpochLog:
    epoch: int
    ce: float
    kl: float
    total: float
    lr: float
    margin: float
    clean: float | None = None
    corrupted: float | None = None
    ood: float | None = None

    FIELDS = ("epoch", "ce", "kl", "total", "lr", "margin", "clean", "corrupted", "ood")

    def row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


@dataclass
class Probes:
    clean: np.ndarray
    corrupted: np.ndarray
    ood: np.ndarray


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: multiply by ``lr_factor`` at every passed decay epoch."""
    passed = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_factor ** passed


def margin_schedule(step: int, total_steps: int, m_final: float, dynamic: bool) -> float:
    """Linear ramp from 0 over the first half of training, then constant."""
    if not dynamic or total_steps <= 0:
        return m_final
    return m_final * min(1.0, 2.0 * step / total_steps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
             lr: float, momentum: float, weight_decay: float) -> ModelParams:
    """Heavy-ball SGD with L2 weight decay; class centers re-projected to unit norm."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    new = {}
    for name, p in params.arrays().items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        vel = state.velocity.get(name)
        step = g + weight_decay * p
        vel = step if vel is None else momentum * vel + step
        state.velocity[name] = vel
        new[name] = p - lr * vel
    new["centers"] = heads.normalize_rows(new["centers"])
    return params.with_arrays(new)


def uncertainty_score(params: ModelParams, x, agg: str = "mean") -> np.ndarray:
    """Deterministic uncertainty: aggregated ``exp(g(x))`` for RTS, the temperature for relaxed."""
    if not params.variant.has_uncertainty:
        raise ValueError(f"{params.variant.value} head has no uncertainty score")
    v = np.exp(heads.log_scale(params, x))
    if params.variant is Variant.RELAXED or agg == "mean":
        return v.mean(axis=-1)
    if agg == "max":
        return v.max(axis=-1)
    if agg == "harmonic":
        return v.shape[-1] / np.sum(1.0 / v, axis=-1)
    raise ValueError(f"unknown aggregation {agg!r}")


def max_softmax_uncertainty(params: ModelParams, x, gamma: float) -> np.ndarray:
    """Baseline score ``1 - max_k softmax(gamma cos_k / t0)``, margin-free."""
    y = heads.embed(params, x)
    t = params.t0 if params.variant is Variant.FIXED else 1.0
    return 1.0 - softmax(gamma * (y @ params.centers.T), t).max(axis=-1)


def select_probes(dataset: Dataset, size: int, rng: RngStream) -> Probes:
    def pick(idx: np.ndarray) -> np.ndarray:
        if idx.size <= size:
            return idx
        return np.sort(idx[rng.choice(idx.size, size=size, replace=False)])

    test = (dataset.split == "test") & (dataset.labels != OOD_LABEL)
    clean = np.flatnonzero(test & (dataset.noise_kind == "clean"))
    corrupted = np.flatnonzero(test & (dataset.noise_kind != "clean"))
    ood = np.flatnonzero(dataset.split == "ood")
    return Probes(pick(clean), pick(corrupted), pick(ood))


def batch_loss(g: Graph, params: ModelParams, x: np.ndarray, labels: np.ndarray,
               config: TrainConfig, margin: float, eps: np.ndarray | None) -> tuple[dict, int, int, int]:
    """Forward pass plus loss nodes; returns (leaves, ce, kl, total) node ids."""
    leaves = heads.param_leaves(g, params)
    fwd = heads.build_forward(g, leaves, params, x, labels, config.gamma, margin, eps)
    ce = cross_entropy_node(g, fwd.logits, labels)
    if params.variant is Variant.RTS:
        kl = kl_gamma_node(g, fwd.log_scales)
        total = g.add(ce, g.scale(kl, config.lam))
    else:
        kl = g.const(0.0)
        total = ce
    return leaves, ce, kl, total


def train(config: TrainConfig, dataset: Dataset, rng: RngStream,
          on_epoch: Callable[[EpochLog], None] | None = None,
          init: ModelParams | None = None) -> tuple[ModelParams, list[EpochLog]]:
    """Run ``config.epochs`` epochs of minibatch SGD on the train split."""
    train_idx = np.flatnonzero((dataset.split == "train") & (dataset.labels != OOD_LABEL))
    if train_idx.size == 0:
        raise ValueError("dataset has no training samples")
    variant = Variant(config.variant)
    params = init.copy() if init is not None else heads.init_params(
        rng.child("init"), dataset.d_x, config.hidden, config.d_y, dataset.num_identities,
        variant, config.dof, config.t0)
    shuffle_rng = rng.child("shuffle")
    temp_rng = rng.child("temperature")
    probes = select_probes(dataset, config.probe_size, rng.child("probes"))

    steps_per_epoch = math.ceil(train_idx.size / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = OptimizerState()
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        sums = np.zeros(3)
        seen = 0
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            margin = margin_schedule(step, total_steps, config.m_final, config.dynamic_margin)
            eps = temp_rng.normal((batch.size, config.dof)) if variant is Variant.RTS else None
            g = Graph()
            leaves, ce, kl, total = batch_loss(g, params, dataset.x[batch], dataset.labels[batch],
                                               config, margin, eps)
            parts = total_loss(float(g.value(ce)), float(g.value(kl)), config.lam
                               if variant is Variant.RTS else 0.0)
            if not math.isfinite(parts.total) or parts.total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {parts.total:g} at epoch {epoch}, step {step}",
                                       params, logs)
            grads = g.backward(total)
            step_grads = clip_by_global_norm({k: grads[i] for k, i in leaves.items()}, config.grad_clip)
            params = sgd_step(params, step_grads, state,
                              lr, config.momentum, config.weight_decay)
            sums += np.array([parts.ce, parts.kl, parts.total]) * batch.size
            seen += batch.size
            step += 1
        means = sums / seen
        entry = EpochLog(epoch=epoch, ce=float(means[0]), kl=float(means[1]), total=float(means[2]),
                         lr=lr, margin=margin_schedule(step, total_steps, config.m_final,
                                                       config.dynamic_margin))
        if variant.has_uncertainty:
            for cohort in ("clean", "corrupted", "ood"):
                idx = getattr(probes, cohort)
                if idx.size:
                    score = uncertainty_score(params, dataset.x[idx], config.score_agg)
                    setattr(entry, cohort, float(score.mean()))
        logs.append(entry)
        log.info("epoch %d loss %.4f (ce %.4f kl %.4f)", epoch, entry.total, entry.ce, entry.kl)
        if on_epoch is not None:
            on_epoch(entry)
    return params, logs


def loss_breakdown(params: ModelParams, x: np.ndarray, labels: np.ndarray, config: TrainConfig,
                   margin: float, eps: np.ndarray | None) -> LossBreakdown:
    g = Graph()
    _, ce, kl, _ = batch_loss(g, params, x, labels, config, margin, eps)
    lam = config.lam if params.variant is Variant.RTS else 0.0
    return total_loss(float(g.value(ce)), float(g.value(kl)), lam)
