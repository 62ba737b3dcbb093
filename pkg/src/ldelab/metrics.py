"""Detection metrics: DET operating points, equal error rate and minimum DCF.

A trial is accepted when its score is >= the threshold.  Candidate thresholds
are the midpoints between consecutive distinct pooled scores plus -inf and
+inf, so the error rates at each candidate are computed from counts rather
than by comparing against the (possibly rounded) midpoint itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldelab.errors import ArgumentError


@dataclass(frozen=True)
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __init__(self, target_scores, nontarget_scores):
        tgt = np.asarray(target_scores, dtype=np.float64).reshape(-1)
        non = np.asarray(nontarget_scores, dtype=np.float64).reshape(-1)
        if tgt.size == 0 or non.size == 0:
            raise ArgumentError("score set needs at least one target and one nontarget score")
        if not (np.all(np.isfinite(tgt)) and np.all(np.isfinite(non))):
            raise ArgumentError("score set contains non-finite scores")
        object.__setattr__(self, "target_scores", tgt)
        object.__setattr__(self, "nontarget_scores", non)

    @classmethod
    def from_labels(cls, scores, is_target) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(is_target, dtype=bool)
        return cls(scores[mask], scores[~mask])


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ArgumentError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ArgumentError("detection costs must be positive")


def _as_set(scores) -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    tgt, non = scores
    return ScoreSet(tgt, non)


def _curve(scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = _as_set(scores)
    tgt = np.sort(s.target_scores)
    non = np.sort(s.nontarget_scores)
    values = np.unique(np.concatenate([tgt, non]))
    # cut k sits just above values[k-1]; cut 0 is -inf, the last is +inf
    below_t = np.searchsorted(tgt, values, side="right")
    below_n = np.searchsorted(non, values, side="right")
    p_miss = np.concatenate([[0.0], below_t / tgt.size])
    p_fa = np.concatenate([[1.0], (non.size - below_n) / non.size])
    mids = 0.5 * (values[:-1] + values[1:])
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    return thresholds, p_miss, p_fa


def det_points(scores) -> list[tuple[float, float, float]]:
    """``(threshold, P_miss, P_fa)`` in increasing threshold order."""
    t, pm, pf = _curve(scores)
    return [(float(a), float(b), float(c)) for a, b, c in zip(t, pm, pf)]


def eer(scores) -> tuple[float, float]:
    """Equal error rate by linear interpolation across the sign change of P_miss - P_fa."""
    t, pm, pf = _curve(scores)
    d = pm - pf
    exact = np.flatnonzero(d == 0)
    if exact.size:
        i = exact[0]
        return float(pm[i]), float(t[i])
    # d starts at -1 and ends at +1 and is non-decreasing
    i = int(np.flatnonzero(d < 0)[-1])
    j = i + 1
    alpha = d[i] / (d[i] - d[j])
    value = pm[i] + alpha * (pm[j] - pm[i])
    if np.isfinite(t[i]) and np.isfinite(t[j]):
        thr = t[i] + alpha * (t[j] - t[i])
    else:
        thr = t[i] if np.isfinite(t[i]) else t[j]
    return float(value), float(thr)


def min_dcf(scores, params: DcfParams = DcfParams()) -> tuple[float, float]:
    """Minimum normalized detection cost over the DET thresholds."""
    t, pm, pf = _curve(scores)
    cost = params.c_miss * params.p_target * pm + params.c_fa * (1.0 - params.p_target) * pf
    cost = cost / min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    i = int(np.argmin(cost))
    return float(cost[i]), float(t[i])


def format_report(scores, params: DcfParams = DcfParams()) -> str:
    e, et = eer(scores)
    d, dt = min_dcf(scores, params)
    return (f"EER {100.0 * e:.4f}% threshold {et:.4f}\n"
            f"minDCF(p={params.p_target:g}) {d:.4f} threshold {dt:.4f}\n")
