"""Cross entropy, the Gamma KL regularizer and their sum.

The plain functions work on numpy arrays; the ``*_node`` variants add the same
computation to a :class:`~rts.diffcore.Graph` for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .diffcore import Graph


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kl: float
    total: float
    lam: float


def logsumexp(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    m = np.max(s, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(s - m), axis=-1, keepdims=True)))[..., 0]


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` via log-sum-exp (0-based label)."""
    s = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < s.shape[-1]:
        raise IndexError(f"label {label} out of range for {s.shape[-1]} classes")
    if not np.all(np.isfinite(s)):
        raise ValueError("logits must be finite")
    return max(float(logsumexp(s) - s[label]), 0.0)


def kl_gamma(v) -> float:
    """Mean over components of ``KL(Gamma(1/2, 1/(2 v_i)) || Gamma(1/2, 1/2))``."""
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if np.any(v <= 0):
        raise ValueError("scales must be positive")
    return float(np.mean(0.5 * (v - np.log(v) - 1.0)))


def kl_numeric_oracle(v: float) -> float:
    """KL(Gamma(1/2, 1/(2v)) || Gamma(1/2, 1/2)) by adaptive quadrature.

    Substituting r = u^2 removes the r^-1/2 singularity of both densities.
    """
    if v <= 0:
        raise ValueError("v must be positive")
    a = 0.5
    bp, bq = 1.0 / (2.0 * v), 0.5
    log_norm_p = a * math.log(bp) - math.lgamma(a)
    log_ratio_const = a * (math.log(bp) - math.log(bq))

    def integrand(u: float) -> float:
        # p(r) dr with r = u^2  ->  2 * exp(log_norm_p - bp u^2) du
        weight = 2.0 * math.exp(log_norm_p - bp * u * u)
        return weight * (log_ratio_const - (bp - bq) * u * u)

    value, err = integrate.quad(integrand, 0.0, math.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    if not math.isfinite(value) or err > 1e-9:
        raise ArithmeticError(f"quadrature did not converge (err={err:g})")
    return value


def total_loss(ce: float, kl: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LossBreakdown(ce=ce, kl=kl, total=ce + lam * kl, lam=lam)


def cross_entropy_node(g: Graph, logits: int, labels) -> int:
    """Batch-mean cross entropy of ``(batch, C)`` logits against integer labels."""
    lse = g.logsumexp(logits)
    picked = g.select_index(logits, labels)
    return g.mean(g.sub(lse, picked))


def kl_gamma_node(g: Graph, log_scales: int) -> int:
    """Batch mean of the KL term, given ``z = log v`` of shape ``(batch, dof)``."""
    v = g.exp(log_scales)
    per = g.scale(g.sub(g.sub(v, log_scales), g.const(1.0)), 0.5)
    return g.mean(per)
