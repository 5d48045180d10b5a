"""Brute-force reference implementations used by the metric tests."""

import math
from fractions import Fraction
from itertools import product


def auc_pairs(in_scores, ood_scores) -> Fraction:
    """Fraction of (in, ood) pairs with in < ood; ties count one half."""
    total = Fraction(0)
    for a, b in product(in_scores, ood_scores):
        if a < b:
            total += 1
        elif a == b:
            total += Fraction(1, 2)
    return total / (len(in_scores) * len(ood_scores))


def roc_points(in_scores, ood_scores):
    """(threshold, tp, fp) for -inf and every distinct score, by direct counting."""
    points = [(float("-inf"), 0, 0)]
    for thr in sorted(set(in_scores) | set(ood_scores)):
        tp = sum(1 for s in in_scores if s <= thr)
        fp = sum(1 for s in ood_scores if s <= thr)
        points.append((thr, tp, fp))
    return points


def tnr_scan(in_scores, ood_scores, target) -> Fraction:
    """Exhaustive threshold scan with exact rational interpolation."""
    pts = roc_points(in_scores, ood_scores)
    n_pos, n_neg = len(in_scores), len(ood_scores)
    need = Fraction(target).limit_denominator(10 ** 6) * n_pos
    for (_, tp0, fp0), (_, tp1, fp1) in zip(pts, pts[1:]):
        if tp0 >= need:
            return 1 - Fraction(fp0, n_neg)
        if tp1 >= need:
            frac = (need - tp0) / (tp1 - tp0)
            return 1 - (fp0 + frac * (fp1 - fp0)) / n_neg
    raise AssertionError("curve never reaches the target")


def fnmr_enum(genuine, impostor, fmr_target):
    """Try every candidate threshold in ascending order; first admissible wins."""
    candidates = sorted(set(impostor)) + [math.nextafter(max(impostor), math.inf)]
    for thr in candidates:
        false_matches = sum(1 for s in impostor if s >= thr)
        if false_matches <= fmr_target * len(impostor):
            return sum(1 for s in genuine if s < thr) / len(genuine), thr
    raise AssertionError("no admissible threshold")
