"""Numerical self-checks of the sampling identities, the KL closed form, the
temperature distribution and the analytic gradients."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy import integrate

from . import diffcore, heads, losses
from .heads import ModelParams, Variant
from .stochastic import (RngStream, gamma_pdf, ks_gamma, mc_gumbel_argmax, sample_temperature,
                         softmax, temperature_law)

THREE_CLASS_SCORES = (2.1, 1.0, 0.6)
KL_POINTS = (0.25, 0.5, 1.0, 2.0, 4.0)
FAULTS = ("gradient",)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status} {self.name}: {self.value:.6g} (limit {self.limit:g}){extra}"


def _le(name: str, value: float, limit: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value <= limit), float(value), float(limit), detail)


def check_gumbel_fixed(rng: RngStream, trials: int = 1_000_000, temps=(0.5, 1.0, 2.0),
                       tol: float = 0.003) -> list[CheckResult]:
    out = []
    for t in temps:
        freq = mc_gumbel_argmax(THREE_CLASS_SCORES, t, trials, rng.child(f"fixed/{t!r}"))
        err = float(np.max(np.abs(freq - softmax(THREE_CLASS_SCORES, t))))
        out.append(_le(f"gumbel-argmax t={t:g}", err, tol, "max |freq - softmax|"))
    return out


def check_gumbel_random(rng: RngStream, cases: int = 20, trials: int = 200_000,
                        sigmas: float = 3.0) -> CheckResult:
    """Worst per-class deviation in binomial standard errors over random score sets."""
    worst = 0.0
    for c in range(cases):
        sub = rng.child(f"random/{c}")
        k = int(sub.integers(2, 7))
        scores = sub.normal(k) * 1.5
        t = float(0.3 + 2.7 * sub.uniform())
        p = softmax(scores, t)
        freq = mc_gumbel_argmax(scores, t, trials, sub)
        se = np.sqrt(np.maximum(p * (1 - p), 1e-300) / trials)
        worst = max(worst, float(np.max(np.abs(freq - p) / se)))
    return _le(f"gumbel-argmax {cases} random cases", worst, sigmas, "worst deviation in sigma")


def check_kl(points=KL_POINTS, tol: float = 1e-6) -> list[CheckResult]:
    err = max(abs(losses.kl_gamma(v) - losses.kl_numeric_oracle(v)) for v in points)
    at_one = abs(losses.kl_gamma(1.0))
    return [_le("kl closed form vs quadrature", err, tol),
            _le("kl at v=1", at_one, 1e-15)]


def _draw_temperatures(rng: RngStream, v: float, dof: int, n: int, chunk: int = 250_000) -> np.ndarray:
    parts = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        parts.append(sample_temperature(rng, np.full((m, dof), v)).t)
    return np.concatenate(parts)


def histogram_mode(t: np.ndarray, width: float = 0.05) -> float:
    """Center of the fullest bin; bins are centered on multiples of ``width``."""
    lo = (math.floor(t.min() / width) - 0.5) * width
    edges = np.arange(lo, t.max() + width, width)
    counts, edges = np.histogram(t, bins=edges)
    i = int(np.argmax(counts))
    return float(0.5 * (edges[i] + edges[i + 1]))


def check_temperature_law(rng: RngStream, n: int = 1_000_000, dof: int = 16,
                          ks_alpha: float = 1e-3) -> list[CheckResult]:
    out = []
    a, b = temperature_law(dof, 1.0)
    t = _draw_temperatures(rng.child("v=1"), 1.0, dof, n)
    out.append(_le("temperature mean (v=1)", abs(t.mean() - a / b), 0.005, f"mean {t.mean():.5f}"))
    mode = histogram_mode(t)
    out.append(_le("temperature mode (v=1)", abs(mode - 1.0), 0.05, f"mode {mode:.3f}"))
    ks = ks_gamma(t, a, b)
    out.append(CheckResult("temperature KS (v=1)", ks.passes(ks_alpha), ks.pvalue, ks_alpha,
                           f"D={ks.statistic:.5f}, pass when p >= limit"))
    a2, b2 = temperature_law(dof, 2.0)
    t2 = _draw_temperatures(rng.child("v=2"), 2.0, dof, n)
    out.append(_le("temperature mean (v=2)", abs(t2.mean() - a2 / b2), 0.01, f"mean {t2.mean():.5f}"))
    ks2 = ks_gamma(t2, a2, b2)
    out.append(CheckResult("temperature KS (v=2)", ks2.passes(ks_alpha), ks2.pvalue, ks_alpha,
                           f"D={ks2.statistic:.5f}, pass when p >= limit"))
    # scale family: t(v=2)/2 must follow the v=1 law
    ks3 = ks_gamma(t2 / 2.0, a, b)
    out.append(CheckResult("temperature scale family", ks3.passes(ks_alpha), ks3.pvalue, ks_alpha,
                           "t(v=2)/2 against the v=1 law"))
    return out


def tiny_model_point(rng: RngStream, d_x: int = 8, hidden: int = 6, d_y: int = 4, classes: int = 5,
                     dof: int = 4, batch: int = 6) -> tuple[ModelParams, np.ndarray, np.ndarray, np.ndarray]:
    """Random RTS parameters, inputs, labels and frozen normal draws."""
    params = heads.init_params(rng.child("init"), d_x, hidden, d_y, classes, Variant.RTS, dof)
    arrays = params.arrays()
    arrays["wg"] = rng.normal(arrays["wg"].shape) * 0.4
    for name in ("b1", "bf", "bg"):
        arrays[name] = rng.normal(arrays[name].shape) * 0.2
    x = heads.normalize_rows(rng.normal((batch, d_x)))
    labels = rng.integers(0, classes, size=batch)
    eps = rng.normal((batch, dof))
    return params.with_arrays(arrays), x, labels, eps


def rts_loss_builder(params: ModelParams, x, labels, eps, gamma: float = 30.0, margin: float = 0.5,
                     lam: float = 10.0) -> Callable:
    def build(g: diffcore.Graph, leaves: dict[str, int]) -> int:
        fwd = heads.build_forward(g, leaves, params, x, labels, gamma, margin, eps)
        ce = losses.cross_entropy_node(g, fwd.logits, labels)
        kl = losses.kl_gamma_node(g, fwd.log_scales)
        return g.add(ce, g.scale(kl, lam))
    return build


def check_gradients(rng: RngStream, points: int = 100, tol: float = 1e-4) -> CheckResult:
    worst = 0.0
    for k in range(points):
        params, x, labels, eps = tiny_model_point(rng.child(f"point/{k}"))
        build = rts_loss_builder(params, x, labels, eps)
        worst = max(worst, diffcore.finite_diff_check(build, params.arrays()))
    return _le(f"gradient vs central differences ({points} points)", worst, tol, "max relative error")


@contextlib.contextmanager
def corrupted_gradient(kind: str = "tanh", factor: float = 1.01) -> Iterator[None]:
    """Temporarily scale one op's backward pass; a fault-injection hook."""
    fwd, bwd, arity = diffcore.OPS[kind]

    def bad(g, v, out, a):
        return tuple(factor * gi for gi in bwd(g, v, out, a))

    diffcore.OPS[kind] = (fwd, bad, arity)
    try:
        yield
    finally:
        diffcore.OPS[kind] = (fwd, bwd, arity)


def density_check(alpha: float = 8.0, beta: float = 7.0) -> CheckResult:
    """The Gamma density integrates to one (trapezoid on a fine grid)."""
    grid = np.linspace(1e-9, 12.0, 120_001)
    mass = float(integrate.trapezoid(gamma_pdf(grid, alpha, beta), grid))
    return _le("gamma density mass", abs(mass - 1.0), 1e-8)


def run_battery(seed: int = 0, inject_fault: str | None = None, grad_points: int = 100,
                mc_trials: int = 1_000_000) -> list[CheckResult]:
    """All checks, each on its own named substream of ``seed``."""
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; choose from {FAULTS}")
    root = RngStream(seed)
    gumbel = root.child("gumbel")
    results = check_gumbel_fixed(gumbel, mc_trials)
    results.append(check_gumbel_random(gumbel))
    results += check_kl()
    results.append(density_check())
    results += check_temperature_law(root.child("temperature"), mc_trials)
    ctx = corrupted_gradient() if inject_fault == "gradient" else contextlib.nullcontext()
    with ctx:
        results.append(check_gradients(root.child("gradients"), grad_points))
    return results
