"""Evaluation protocols on a trained model: OOD detection, graded-noise curves,
pairwise verification and error-versus-reject."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evalmetrics as em
from . import heads
from .datasynth import MASKOUT_CAP, OOD_LABEL, Dataset, PairSet, corrupt
from .heads import ModelParams
from .stochastic import RngStream
from .trainer import max_softmax_uncertainty, uncertainty_score

DEFAULT_FMRS = (1e-1, 1e-2, 1e-3)


@dataclass
class OodResult:
    curve: em.RocCurve
    auc: float
    tnr_at_tpr90: float
    tnr_at_tpr95: float


@dataclass
class NoiseCurve:
    """Scores of clean probes re-corrupted at graded levels.

    ``kinds`` / ``levels`` / ``scores`` are aligned per evaluated sample;
    level 0 rows are the untouched probes and are shared by every kind.
    """

    kinds: np.ndarray
    levels: np.ndarray
    scores: np.ndarray
    rho: float
    rho_by_kind: dict[str, float] = field(default_factory=dict)


def in_and_ood(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """In-distribution = every identity sample of the test split."""
    test = np.flatnonzero((dataset.split == "test") & (dataset.labels != OOD_LABEL))
    ood = np.flatnonzero(dataset.split == "ood")
    if test.size == 0 or ood.size == 0:
        raise ValueError("dataset needs both test identity samples and OOD samples")
    return test, ood


def ood_from_scores(in_scores, ood_scores) -> OodResult:
    curve = em.roc(in_scores, ood_scores)
    return OodResult(curve=curve, auc=em.auc(curve), tnr_at_tpr90=em.tnr_at_tpr(curve, 0.90),
                     tnr_at_tpr95=em.tnr_at_tpr(curve, 0.95))


def score_samples(params: ModelParams, x, score: str = "v", gamma: float = 30.0,
                  agg: str = "mean") -> np.ndarray:
    """``v``: learned scale (uncertainty heads only); ``maxprob``: ``1 - max softmax``."""
    if score == "v":
        return uncertainty_score(params, x, agg)
    if score == "maxprob":
        return max_softmax_uncertainty(params, x, gamma)
    raise ValueError(f"unknown score {score!r}")


def ood_detection(params: ModelParams, dataset: Dataset, score: str = "v", gamma: float = 30.0,
                  agg: str = "mean") -> OodResult:
    test, ood = in_and_ood(dataset)
    s = score_samples(params, dataset.x, score, gamma, agg)
    return ood_from_scores(s[test], s[ood])


def noise_curve(params: ModelParams, dataset: Dataset, rng: RngStream, kinds, levels,
                n_probes: int = 200, agg: str = "mean") -> NoiseCurve:
    """Re-corrupt the first ``n_probes`` clean test samples at every (kind, level).

    Maskout levels are capped so the vector keeps a nonzero coordinate. The
    pooled Spearman correlation runs over all rows, level 0 included.
    """
    clean = np.flatnonzero((dataset.split == "test") & (dataset.noise_kind == "clean")
                           & (dataset.labels != OOD_LABEL))[:n_probes]
    if clean.size < 2:
        raise ValueError("need at least two clean test probes")
    x0 = dataset.x[clean]
    base = uncertainty_score(params, x0, agg)
    kinds_out = [np.full(clean.size, "clean", dtype=object)]
    levels_out = [np.zeros(clean.size)]
    scores_out = [base]
    rho_by_kind = {}
    for kind in kinds:
        k_levels, k_scores = [np.zeros(clean.size)], [base]
        for level in levels:
            level = min(float(level), MASKOUT_CAP) if kind == "maskout" else float(level)
            sub = rng.child(f"{kind}/{level!r}")
            xs = np.array([corrupt(v, kind, level, sub) for v in x0])
            s = uncertainty_score(params, xs, agg)
            kinds_out.append(np.full(clean.size, kind, dtype=object))
            levels_out.append(np.full(clean.size, level))
            scores_out.append(s)
            k_levels.append(levels_out[-1])
            k_scores.append(s)
        rho_by_kind[kind] = em.spearman(np.concatenate(k_levels), np.concatenate(k_scores))
    levels_all = np.concatenate(levels_out)
    scores_all = np.concatenate(scores_out)
    return NoiseCurve(kinds=np.concatenate(kinds_out), levels=levels_all, scores=scores_all,
                      rho=em.spearman(levels_all, scores_all), rho_by_kind=rho_by_kind)


def pair_similarity(params: ModelParams, dataset: Dataset):
    """Cosine similarity of embeddings, as a function of ``(n, 2)`` index pairs."""
    emb = heads.embed(params, dataset.x)

    def sim(pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.sum(emb[pairs[:, 0]] * emb[pairs[:, 1]], axis=1)

    return sim


@dataclass
class VerificationResult:
    genuine_sims: np.ndarray
    impostor_sims: np.ndarray
    accuracy: float
    accuracy_threshold: float
    fnmr_at_fmr: dict[float, tuple[float, float]]


def verify_pairs(params: ModelParams, dataset: Dataset, pairs: PairSet,
                 fmrs=DEFAULT_FMRS) -> VerificationResult:
    sim = pair_similarity(params, dataset)
    gen, imp = sim(pairs.genuine), sim(pairs.impostor)
    acc, thr = em.verification_accuracy(gen, imp)
    table = {float(f): em.fnmr_at_fmr(gen, imp, f) for f in fmrs}
    return VerificationResult(gen, imp, acc, thr, table)


def reject_curve(params: ModelParams, dataset: Dataset, pairs: PairSet, fmr: float,
                 fractions, agg: str = "mean") -> em.RejectCurve:
    u = uncertainty_score(params, dataset.x, agg)
    return em.error_vs_reject(pairs.genuine, pairs.impostor, pair_similarity(params, dataset),
                              u, fmr, fractions)
