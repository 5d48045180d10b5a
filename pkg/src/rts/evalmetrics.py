"""OOD and verification metrics.

Convention used everywhere: a score is an *uncertainty* (higher means more
likely out-of-distribution). ROC positives are the in-distribution samples, and
a sample is predicted positive when its score is <= the threshold.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class RocCurve:
    """Operating points of a full threshold sweep, kept as integer counts.

    Point 0 is the empty acceptance set (threshold -inf); the last point accepts
    everything. ``tp[i]`` / ``fp[i]`` count in-distribution / OOD scores <=
    ``thresholds[i]``.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg


@dataclass(frozen=True)
class RejectCurve:
    fractions: np.ndarray
    fnmr: np.ndarray  # nan where the point is undefined
    thresholds: np.ndarray
    n_removed: np.ndarray


def _as_scores(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def roc(in_scores, ood_scores) -> RocCurve:
    pos = np.sort(_as_scores(in_scores, "in_scores"))
    neg = np.sort(_as_scores(ood_scores, "ood_scores"))
    thresholds = np.unique(np.concatenate([pos, neg]))
    tp = np.searchsorted(pos, thresholds, side="right")
    fp = np.searchsorted(neg, thresholds, side="right")
    return RocCurve(
        thresholds=np.concatenate([[-np.inf], thresholds]),
        tp=np.concatenate([[0], tp]).astype(np.int64),
        fp=np.concatenate([[0], fp]).astype(np.int64),
        n_pos=pos.size, n_neg=neg.size,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area; equal to the Mann-Whitney statistic with ties as 1/2.

    Accumulated in integers so that it is exact up to the final division.
    """
    dfp = np.diff(curve.fp)
    twice_area = int(np.sum(dfp * (curve.tp[1:] + curve.tp[:-1])))
    return twice_area / (2 * curve.n_pos * curve.n_neg)


def tnr_at_tpr(curve: RocCurve, tpr_target: float) -> float:
    """``1 - FPR`` where the curve first reaches ``tpr_target``, linearly
    interpolated between the bracketing sweep points.

    The interpolation runs in rational arithmetic (the target is read as its
    shortest decimal), so the result is the correctly rounded exact value.
    """
    if not 0 < tpr_target <= 1:
        raise ValueError("tpr_target must be in (0, 1]")
    need = Fraction(repr(float(tpr_target))) * curve.n_pos
    i = int(np.argmax(curve.tp >= need))
    if i == 0:
        fp = Fraction(int(curve.fp[0]))
    else:
        tp0, tp1 = int(curve.tp[i - 1]), int(curve.tp[i])
        fp0, fp1 = int(curve.fp[i - 1]), int(curve.fp[i])
        fp = fp0 + (need - tp0) / (tp1 - tp0) * (fp1 - fp0)
    return float(1 - fp / curve.n_neg)


def fnmr_at_fmr(genuine_sims, impostor_sims, fmr_target: float = 1e-3) -> tuple[float, float]:
    """False non-match rate at the smallest impostor-derived threshold whose
    false match rate does not exceed ``fmr_target``.

    Candidate thresholds are the impostor similarities plus one value just
    above the largest of them, so a target below ``1/len(impostor)`` puts the
    threshold above every impostor. Returns ``(fnmr, threshold)``.
    """
    gen = np.sort(_as_scores(genuine_sims, "genuine_sims"))
    imp = np.sort(_as_scores(impostor_sims, "impostor_sims"))
    if not 0 <= fmr_target <= 1:
        raise ValueError("fmr_target must be in [0, 1]")
    n = imp.size
    candidates = np.concatenate([np.unique(imp), [np.nextafter(imp[-1], np.inf)]])
    # impostors >= threshold
    at_or_above = n - np.searchsorted(imp, candidates, side="left")
    ok = at_or_above <= fmr_target * n
    threshold = candidates[int(np.argmax(ok))]
    fnmr = np.searchsorted(gen, threshold, side="left") / gen.size
    return float(fnmr), float(threshold)


def removal_order(uncertainty) -> np.ndarray:
    """Positions sorted for rejection: highest uncertainty first, ties by
    descending index."""
    u = np.asarray(uncertainty, dtype=np.float64)
    idx = np.arange(u.size)
    return np.lexsort((-idx, -u))


def error_vs_reject(genuine: np.ndarray, impostor: np.ndarray, similarity,
                    uncertainty: dict[int, float] | np.ndarray, fmr_target: float,
                    fractions) -> RejectCurve:
    """FNMR at fixed FMR after rejecting the most uncertain images.

    ``genuine`` / ``impostor`` are ``(n, 2)`` image-index pairs and
    ``similarity(pairs)`` returns their similarities. ``uncertainty`` maps every
    image index occurring in a pair to its score.
    """
    genuine = np.asarray(genuine, dtype=np.int64).reshape(-1, 2)
    impostor = np.asarray(impostor, dtype=np.int64).reshape(-1, 2)
    images = np.unique(np.concatenate([genuine.ravel(), impostor.ravel()]))
    if isinstance(uncertainty, dict):
        missing = [int(i) for i in images if int(i) not in uncertainty]
        if missing:
            raise KeyError(f"no uncertainty score for images {missing[:5]}")
        scores = np.array([uncertainty[int(i)] for i in images])
    else:
        scores = np.asarray(uncertainty, dtype=np.float64)[images]
    order = images[removal_order(scores)]
    gen_sims = np.asarray(similarity(genuine), dtype=np.float64)
    imp_sims = np.asarray(similarity(impostor), dtype=np.float64)

    fractions = np.asarray(fractions, dtype=np.float64)
    fnmr = np.full(fractions.size, np.nan)
    thresholds = np.full(fractions.size, np.nan)
    removed_counts = np.zeros(fractions.size, dtype=np.int64)
    for k, f in enumerate(fractions):
        if not 0 <= f < 1:
            raise ValueError("reject fractions must lie in [0, 1)")
        n_remove = math.ceil(f * images.size - 1e-12)
        removed = order[:n_remove]
        removed_counts[k] = n_remove
        keep_g = ~np.isin(genuine, removed).any(axis=1)
        keep_i = ~np.isin(impostor, removed).any(axis=1)
        if not keep_g.any() or not keep_i.any():
            continue
        fnmr[k], thresholds[k] = fnmr_at_fmr(gen_sims[keep_g], imp_sims[keep_i], fmr_target)
    return RejectCurve(fractions=fractions, fnmr=fnmr, thresholds=thresholds, n_removed=removed_counts)


def verification_accuracy(genuine_sims, impostor_sims) -> tuple[float, float]:
    """Best accuracy over all thresholds (accept when similarity >= threshold)."""
    gen = np.sort(_as_scores(genuine_sims, "genuine_sims"))
    imp = np.sort(_as_scores(impostor_sims, "impostor_sims"))
    candidates = np.concatenate([np.unique(np.concatenate([gen, imp])), [np.inf]])
    correct_gen = gen.size - np.searchsorted(gen, candidates, side="left")
    correct_imp = np.searchsorted(imp, candidates, side="left")
    acc = (correct_gen + correct_imp) / (gen.size + imp.size)
    best = int(np.argmax(acc))
    return float(acc[best]), float(candidates[best])


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 3:
        raise ValueError("need two equal-length sequences of at least 3 values")
    rx = rankdata(xs) - (xs.size + 1) / 2.0
    ry = rankdata(ys) - (ys.size + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        raise ValueError("a ranking has zero variance")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))
