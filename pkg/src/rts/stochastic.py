"""Seedable random streams, Gumbel / temperature samplers and Gamma utilities."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

EULER_GAMMA = 0.5772156649015329
UNIFORM_EPS = 1e-12
TEMPERATURE_FLOOR = 1e-3


def stream_id(name: str) -> int:
    """Stable 64-bit id for a named substream."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class RngStream:
    """Counter-based stream keyed by ``(seed, stream_id)``.

    Backed by Philox: the two key words are the seed and the stream id, so
    distinct ids give independent sequences and the same pair always replays
    the same one.
    """

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = stream_id(stream) if isinstance(stream, str) else int(stream) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def child(self, name: str) -> RngStream:
        return RngStream(self.seed, stream_id(f"{self.stream_id}/{name}"))

    @property
    def counter(self) -> np.ndarray:
        return self.gen.bit_generator.state["state"]["counter"]

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)


@dataclass
class TemperatureDraw:
    v: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    floored: np.ndarray

    @property
    def dof(self) -> int:
        return self.v.shape[-1]


def sample_gumbel(rng: RngStream, n, t: float = 1.0) -> np.ndarray:
    """Gumbel(0, t) variates by inversion, ``-t * log(-log(U))``."""
    if t <= 0:
        raise ValueError("Gumbel scale must be positive")
    u = np.clip(rng.uniform(n), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -t * np.log(-np.log(u))


def temperature_from(v: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Raw temperature ``sum(v * eps**2) / (dof - 2)`` along the last axis."""
    dof = v.shape[-1]
    if dof <= 2:
        raise ValueError(f"degrees of freedom must be >= 3, got {dof}")
    return np.sum(v * eps * eps, axis=-1) / (dof - 2)


def sample_temperature(rng: RngStream, v) -> TemperatureDraw:
    """Draw one temperature per row of ``v`` (shape ``(dof,)`` or ``(batch, dof)``).

    Degenerate draws below ``TEMPERATURE_FLOOR`` are floored and flagged.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] <= 2:
        raise ValueError(f"degrees of freedom must be >= 3, got {v.shape[-1]}")
    if np.any(v <= 0):
        raise ValueError("temperature scales must be positive")
    eps = rng.normal(v.shape)
    return draw_from(v, eps)


def draw_from(v: np.ndarray, eps: np.ndarray) -> TemperatureDraw:
    raw = temperature_from(v, eps)
    floored = raw < TEMPERATURE_FLOOR
    return TemperatureDraw(v=v, eps=eps, t=np.maximum(raw, TEMPERATURE_FLOOR), floored=floored)


def temperature_law(dof: int, v: float) -> tuple[float, float]:
    """(shape, rate) of the temperature when every component shares scale ``v``."""
    alpha = dof / 2.0
    return alpha, (alpha - 1.0) / v


def gamma_logpdf(t, alpha: float, beta: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if np.any(t <= 0):
        raise ValueError("gamma density is defined for t > 0")
    return alpha * math.log(beta) + (alpha - 1.0) * np.log(t) - beta * t - math.lgamma(alpha)


def gamma_pdf(t, alpha: float, beta: float) -> np.ndarray:
    """Gamma(shape=alpha, rate=beta) density, evaluated in log space."""
    return np.exp(gamma_logpdf(t, alpha, beta))


def _gammainc_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a: float, x: float) -> float:
    # modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gammainc_series(a, x)
    return 1.0 - _gammaincc_cf(a, x)


def gamma_cdf(t, alpha: float, beta: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    flat = [regularized_gamma_p(alpha, beta * x) for x in t.ravel()]
    return np.array(flat).reshape(t.shape)


@dataclass
class KSResult:
    statistic: float
    pvalue: float
    n: int

    def passes(self, alpha: float) -> bool:
        return self.pvalue >= alpha


def ks_gamma(samples, alpha: float, beta: float) -> KSResult:
    """One-sample Kolmogorov-Smirnov test against Gamma(alpha, rate=beta)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    cdf = _gamma_cdf_sorted(x, alpha, beta)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    return KSResult(statistic=float(d), pvalue=float(stats.kstwo.sf(d, n)), n=n)


def _gamma_cdf_sorted(x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    if x.size <= 5000:
        return gamma_cdf(x, alpha, beta)
    # linear interpolation on a dense grid; error ~ h^2 max|f''| / 8, far below
    # the KS statistic resolution at these sample sizes
    grid = np.linspace(x[0], x[-1], 20_001)
    return np.interp(x, grid, gamma_cdf(grid, alpha, beta))


def mc_gumbel_argmax(scores, t: float, trials: int, rng: RngStream,
                     chunk: int = 200_000) -> np.ndarray:
    """Frequency of ``argmax_k(s_k + u_k)`` with ``u_k ~ Gumbel(0, t)`` i.i.d."""
    s = np.asarray(scores, dtype=np.float64)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    counts = np.zeros(s.size, dtype=np.int64)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        u = sample_gumbel(rng, (m, s.size), t)
        counts += np.bincount(np.argmax(s + u, axis=1), minlength=s.size)
        done += m
    return counts / trials


def softmax(scores, t: float = 1.0) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64) / t
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=-1, keepdims=True)
