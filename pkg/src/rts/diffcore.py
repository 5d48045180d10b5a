"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Graph` is an append-only tape. Every node stores its op kind, the ids
of its parents and its cached forward value. Parents always precede children,
so one reverse sweep over the tape visits nodes in a valid topological order.

Values are plain ``numpy.ndarray`` objects of dtype float64 (row-major), which
is all a dense tensor needs to be here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

ACOS_EPS = 1e-7
ACOS_REJECT = 1e-6


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.kind in ("param", "const")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# Each op: forward(values, attrs) -> value; backward(g, values, out, attrs) -> parent grads.

def _add_fwd(v, a):
    _check_broadcast(*v)
    return v[0] + v[1]


def _add_bwd(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _sub_fwd(v, a):
    _check_broadcast(*v)
    return v[0] - v[1]


def _sub_bwd(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)


def _mul_fwd(v, a):
    _check_broadcast(*v)
    return v[0] * v[1]


def _mul_bwd(g, v, out, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _div_fwd(v, a):
    _check_broadcast(*v)
    if np.any(v[1] == 0.0):
        raise DomainError("division by zero")
    return v[0] / v[1]


def _div_bwd(g, v, out, a):
    return (_unbroadcast(g / v[1], v[0].shape),
            _unbroadcast(-g * out / v[1], v[1].shape))


def _matmul_fwd(v, a):
    x, w = v
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {x.shape}@{w.shape}")
    return x @ w


def _matmul_bwd(g, v, out, a):
    x, w = v
    return g @ w.T, x.T @ g


def _transpose_fwd(v, a):
    if v[0].ndim != 2:
        raise ShapeError("transpose needs a 2-D array")
    return v[0].T.copy()


def _transpose_bwd(g, v, out, a):
    return (g.T,)


def _scale_fwd(v, a):
    return a["c"] * v[0]


def _scale_bwd(g, v, out, a):
    return (a["c"] * g,)


def _exp_fwd(v, a):
    # overflow surfaces as NonFiniteError from Graph.forward
    with np.errstate(over="ignore"):
        return np.exp(v[0])


def _exp_bwd(g, v, out, a):
    return (g * out,)


def _log_fwd(v, a):
    if np.any(v[0] <= 0.0):
        raise DomainError("log of non-positive value")
    return np.log(v[0])


def _log_bwd(g, v, out, a):
    return (g / v[0],)


def _acos_fwd(v, a):
    if np.any(np.abs(v[0]) > 1.0 + ACOS_REJECT):
        raise DomainError("acos input outside [-1, 1]")
    return np.arccos(np.clip(v[0], -1.0, 1.0))


def _acos_bwd(g, v, out, a):
    u = np.clip(v[0], -1.0 + ACOS_EPS, 1.0 - ACOS_EPS)
    return (-g / np.sqrt(1.0 - u * u),)


def _cos_fwd(v, a):
    return np.cos(v[0])


def _cos_bwd(g, v, out, a):
    return (-g * np.sin(v[0]),)


def _tanh_fwd(v, a):
    return np.tanh(v[0])


def _tanh_bwd(g, v, out, a):
    return (g * (1.0 - out * out),)


def _sum_fwd(v, a):
    return np.asarray(np.sum(v[0], axis=a["axis"]), dtype=np.float64)


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def _sum_bwd(g, v, out, a):
    return (_expand_reduced(g, v[0].shape, a["axis"]),)


def _mean_fwd(v, a):
    return np.asarray(np.mean(v[0], axis=a["axis"]), dtype=np.float64)


def _mean_bwd(g, v, out, a):
    x = v[0]
    n = x.size if a["axis"] is None else x.shape[a["axis"]]
    return (_expand_reduced(g, x.shape, a["axis"]) / n,)


def _l2n_fwd(v, a):
    norm = np.linalg.norm(v[0], axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("cannot normalize a zero vector")
    return v[0] / norm


def _l2n_bwd(g, v, out, a):
    norm = np.linalg.norm(v[0], axis=-1, keepdims=True)
    proj = np.sum(g * out, axis=-1, keepdims=True)
    return ((g - out * proj) / norm,)


def _lse_fwd(v, a):
    x = v[0]
    m = np.max(x, axis=-1, keepdims=True)
    return np.asarray((m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0])


def _lse_bwd(g, v, out, a):
    p = np.exp(v[0] - np.expand_dims(out, -1))
    return (np.expand_dims(g, -1) * p,)


def _select_fwd(v, a):
    x, idx = v[0], a["index"]
    if x.ndim == 1:
        if not 0 <= idx < x.shape[0]:
            raise ShapeError(f"index {idx} out of range for length {x.shape[0]}")
        return np.asarray(x[idx])
    if x.ndim != 2 or len(idx) != x.shape[0]:
        raise ShapeError("select needs a 1-D array or one index per row")
    if np.any((idx < 0) | (idx >= x.shape[1])):
        raise ShapeError("row index out of range")
    return x[np.arange(x.shape[0]), idx]


def _select_bwd(g, v, out, a):
    x, idx = v[0], a["index"]
    grad = np.zeros_like(x)
    if x.ndim == 1:
        grad[idx] = g
    else:
        grad[np.arange(x.shape[0]), idx] = g
    return (grad,)


def _reshape_fwd(v, a):
    try:
        return v[0].reshape(a["shape"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _reshape_bwd(g, v, out, a):
    return (g.reshape(v[0].shape),)


def _clip_fwd(v, a):
    return np.clip(v[0], a["lo"], a["hi"])


def _clip_bwd(g, v, out, a):
    if a.get("straight_through"):
        return (g,)
    x = v[0]
    inside = (x >= a["lo"]) & (x <= a["hi"])
    return (np.where(inside, g, 0.0),)


OPS: dict[str, tuple[Callable, Callable, int]] = {
    "add": (_add_fwd, _add_bwd, 2),
    "sub": (_sub_fwd, _sub_bwd, 2),
    "mul": (_mul_fwd, _mul_bwd, 2),
    "div": (_div_fwd, _div_bwd, 2),
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "transpose": (_transpose_fwd, _transpose_bwd, 1),
    "scale": (_scale_fwd, _scale_bwd, 1),
    "exp": (_exp_fwd, _exp_bwd, 1),
    "log": (_log_fwd, _log_bwd, 1),
    "acos": (_acos_fwd, _acos_bwd, 1),
    "cos": (_cos_fwd, _cos_bwd, 1),
    "tanh": (_tanh_fwd, _tanh_bwd, 1),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "mean": (_mean_fwd, _mean_bwd, 1),
    "l2_normalize": (_l2n_fwd, _l2n_bwd, 1),
    "logsumexp": (_lse_fwd, _lse_bwd, 1),
    "select_index": (_select_fwd, _select_bwd, 1),
    "reshape": (_reshape_fwd, _reshape_bwd, 1),
    "clip": (_clip_fwd, _clip_bwd, 1),
}

_DEFAULT_ATTRS = {"sum": {"axis": None}, "mean": {"axis": None}}


class GradMap(Mapping[int, np.ndarray]):
    """Gradients keyed by node id; unreachable nodes read as zeros."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        if node_id in self._grads:
            return self._grads[node_id]
        return np.zeros_like(self._graph.value(node_id))

    def __iter__(self):
        return iter(range(len(self._graph.nodes)))

    def __len__(self) -> int:
        return len(self._graph.nodes)


class Graph:
    """Append-only computation tape.

    Leaves are created with :meth:`param` (differentiable) or :meth:`const`
    (held fixed, e.g. sampled noise). Interior nodes are created with
    :meth:`forward` or the named helpers, which just call it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _append(self, node: Node) -> int:
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"{node.kind} produced a non-finite value")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, value: Any) -> int:
        return self._append(Node("param", (), np.array(value, dtype=np.float64)))

    def const(self, value: Any) -> int:
        return self._append(Node("const", (), np.array(value, dtype=np.float64)))

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def forward(self, kind: str, parents: tuple[int, ...] | list[int], **attrs: Any) -> int:
        if kind not in OPS:
            raise ValueError(f"unknown op kind {kind!r}")
        fwd, _, arity = OPS[kind]
        parents = tuple(parents)
        if len(parents) != arity:
            raise ShapeError(f"{kind} takes {arity} parent(s), got {len(parents)}")
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ValueError(f"unknown parent node {p}")
        attrs = {**_DEFAULT_ATTRS.get(kind, {}), **attrs}
        values = [self.nodes[p].value for p in parents]
        out = np.asarray(fwd(values, attrs), dtype=np.float64)
        return self._append(Node(kind, parents, out, attrs))

    def backward(self, loss: int) -> GradMap:
        """Reverse sweep from a scalar node; returns d(loss)/d(node) for every node."""
        if self.nodes[loss].value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {self.nodes[loss].value.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(self.nodes[loss].value)}
        for nid in range(loss, -1, -1):
            node = self.nodes[nid]
            if nid not in grads or node.is_leaf:
                continue
            _, bwd, _ = OPS[node.kind]
            values = [self.nodes[p].value for p in node.parents]
            for p, gp in zip(node.parents, bwd(grads[nid], values, node.value, node.attrs)):
                if p in grads:
                    grads[p] = grads[p] + gp
                else:
                    grads[p] = np.asarray(gp, dtype=np.float64)
        return GradMap(self, grads)

    # thin helpers
    def add(self, a, b): return self.forward("add", (a, b))
    def sub(self, a, b): return self.forward("sub", (a, b))
    def mul(self, a, b): return self.forward("mul", (a, b))
    def div(self, a, b): return self.forward("div", (a, b))
    def matmul(self, a, b): return self.forward("matmul", (a, b))
    def transpose(self, a): return self.forward("transpose", (a,))
    def scale(self, a, c: float): return self.forward("scale", (a,), c=float(c))
    def exp(self, a): return self.forward("exp", (a,))
    def log(self, a): return self.forward("log", (a,))
    def acos(self, a): return self.forward("acos", (a,))
    def cos(self, a): return self.forward("cos", (a,))
    def tanh(self, a): return self.forward("tanh", (a,))
    def sum(self, a, axis=None): return self.forward("sum", (a,), axis=axis)
    def mean(self, a, axis=None): return self.forward("mean", (a,), axis=axis)
    def l2_normalize(self, a): return self.forward("l2_normalize", (a,))
    def logsumexp(self, a): return self.forward("logsumexp", (a,))
    def reshape(self, a, shape): return self.forward("reshape", (a,), shape=tuple(shape))
    def clip(self, a, lo, hi, straight_through=False):
        return self.forward("clip", (a,), lo=float(lo), hi=float(hi), straight_through=straight_through)

    def select_index(self, a, index):
        index = int(index) if np.ndim(index) == 0 else np.asarray(index, dtype=np.int64)
        return self.forward("select_index", (a,), index=index)


Point = np.ndarray | Mapping[str, np.ndarray]
Builder = Callable[[Graph, Any], int]


def _evaluate(build: Builder, point: Point) -> tuple[Graph, Any, int]:
    g = Graph()
    if isinstance(point, Mapping):
        leaves: Any = {k: g.param(v) for k, v in point.items()}
    else:
        leaves = g.param(point)
    return g, leaves, build(g, leaves)


def finite_diff_check(build: Builder, point: Point, step: float = 1e-5) -> float:
    """Compare backward() against central differences.

    ``build(graph, leaves)`` must add the computation to ``graph`` and return
    the scalar loss node; ``leaves`` is a node id, or a dict of node ids when
    ``point`` is a dict of arrays. Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = isinstance(point, Mapping)
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()} if named \
        else {"": np.array(point, dtype=np.float64)}

    def at(values: dict[str, np.ndarray]) -> float:
        g, _, loss = _evaluate(build, values if named else values[""])
        out = float(g.value(loss))
        if not np.isfinite(out):
            raise NonFiniteError("function is not finite near the check point")
        return out

    g, leaves, loss = _evaluate(build, base if named else base[""])
    grads = g.backward(loss)
    leaf_ids = leaves if named else {"": leaves}

    worst = 0.0
    for key, arr in base.items():
        analytic = grads[leaf_ids[key]]
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            up = at(base)
            arr[i] = orig - step
            down = at(base)
            arr[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
