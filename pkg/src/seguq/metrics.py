"""Downstream-task metrics: segmentation quality, OoD detection, failure
detection, calibration, ambiguity modeling and active learning."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .core import (
    Measure,
    ProbabilityStack,
    RaterSet,
    UncertaintyMap,
    UncertaintyType,
    UQError,
    check_same_shape,
    mean_prediction,
)


@dataclass(frozen=True)
class RiskCoveragePoint:
    coverage: float
    selective_risk: float


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    mean_confidence: float
    accuracy: float
    count: int


# ---------------------------------------------------------------- segmentation


def dice(pred, ref, positive_class: int = 1) -> float:
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise UQError("SHAPE_MISMATCH", f"{pred.shape} vs {ref.shape}")
    p = pred == positive_class
    r = ref == positive_class
    tp = np.count_nonzero(p & r)
    denom = np.count_nonzero(p) + np.count_nonzero(r)
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def mean_rater_dice(stack, raters: RaterSet, positive_class: int = 1) -> float:
    _, labels = mean_prediction(stack)
    check_same_shape(labels, raters.masks[0])
    return float(np.mean([dice(labels, r, positive_class) for r in raters.masks]))


def pairwise_dice(a: Sequence, b: Sequence, positive_class: int = 1) -> np.ndarray:
    """Dice for every pair in ``a x b`` as an ``[len(a), len(b)]`` matrix."""
    A = np.stack([(np.asarray(x) == positive_class).ravel() for x in a]).astype(np.float64)
    B = np.stack([(np.asarray(x) == positive_class).ravel() for x in b]).astype(np.float64)
    if A.shape[1] != B.shape[1]:
        raise UQError("SHAPE_MISMATCH", "masks differ in size")
    tp = A @ B.T
    denom = A.sum(1)[:, None] + B.sum(1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 1.0)
    return d


# --------------------------------------------------------------- OoD detection


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise UQError("SHAPE_MISMATCH", f"{s.shape} vs {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        raise UQError("SINGLE_CLASS", f"{n_pos} positives, {n_neg} negatives")
    ranks = rankdata(s)  # average ranks give half credit to ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ------------------------------------------------------------ failure detection


def risk_coverage_curve(confidences, risks) -> list:
    """Selective risk at every distinct confidence threshold, full coverage first.

    Cases sharing a confidence enter or leave together, so each point sits at
    the coverage of one threshold ``g >= tau``.
    """
    c = np.asarray(confidences, dtype=np.float64)
    r = np.asarray(risks, dtype=np.float64)
    if c.size == 0:
        raise UQError("EMPTY_INPUT", "no cases")
    if c.shape != r.shape or c.ndim != 1:
        raise UQError("SHAPE_MISMATCH", f"{c.shape} vs {r.shape}")
    order = np.argsort(-c, kind="stable")
    c, r = c[order], r[order]
    n = c.size
    cum = np.cumsum(r)
    # last index of every tie group in descending order
    ends = np.flatnonzero(np.append(c[1:] != c[:-1], True))
    k = ends + 1
    pts = [RiskCoveragePoint(kk / n, cum[e] / kk) for kk, e in zip(k, ends)]
    return pts[::-1]


def aurc(confidences, risks) -> float:
    """Trapezoidal area under the risk-coverage curve.

    The curve is held flat from its smallest coverage down to coverage 0 (the
    empty selection takes the risk of the most confident group), so a
    constant risk ``r`` integrates to ``r``.
    """
    pts = risk_coverage_curve(confidences, risks)
    area = pts[-1].coverage * pts[-1].selective_risk
    for hi, lo in zip(pts[:-1], pts[1:]):
        area += (hi.coverage - lo.coverage) * (hi.selective_risk + lo.selective_risk) / 2.0
    return area


def e_aurc(confidences, risks) -> float:
    """AURC in excess of the optimal ranking (ascending risk).

    The optimal ranking gets one position per case: letting equal risks
    share a confidence would merge them into a coarser curve than the best
    achievable one. Which of several equal risks goes first does not move the
    curve.
    """
    r = np.asarray(risks, dtype=np.float64)
    return aurc(confidences, r) - aurc(-rankdata(r, method="ordinal"), r)


# ----------------------------------------------------------------- calibration


@dataclass(frozen=True)
class PlattScaling:
    a: float
    b: float
    converged: bool = True
    capped: bool = False
    n_iter: int = 0

    @property
    def flags(self) -> list:
        return ["CONVERGENCE_CAPPED"] if self.capped else []

    def __call__(self, scores) -> np.ndarray:
        return expit(self.a * np.asarray(scores, dtype=np.float64) + self.b)


def platt_scale(scores, correct, *, tol: float = 1e-8, max_iter: int = 100, cap: float = 1e4) -> PlattScaling:
    """Maximum-likelihood logistic fit ``P(correct) = sigmoid(a * score + b)``.

    Damped Newton with step halving. Perfectly separated data has no finite
    optimum; once ``|a|`` or ``|b|`` exceeds ``cap`` the fit stops and returns
    capped parameters flagged ``CONVERGENCE_CAPPED``.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(correct, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise UQError("SHAPE_MISMATCH", f"{x.shape} vs {y.shape}")
    if x.size == 0 or y.min() == y.max():
        raise UQError("SINGLE_CLASS", "both outcomes must be present")

    def nll(a, b):
        z = a * x + b
        return float(np.sum(np.logaddexp(0.0, z) - y * z))

    lo0, hi0 = x[y == 0].min(), x[y == 0].max()
    lo1, hi1 = x[y == 1].min(), x[y == 1].max()
    if (hi0 <= lo1 or hi1 <= lo0) and x.min() < x.max():
        # (quasi-)complete separation: the likelihood has no finite maximizer
        sign = 1.0 if hi0 <= lo1 else -1.0
        mid = (hi0 + lo1) / 2.0 if sign > 0 else (hi1 + lo0) / 2.0
        a = sign * cap
        return PlattScaling(a, -a * mid, converged=False, capped=True)

    base = y.mean()
    a, b = 0.0, math.log(base / (1.0 - base))
    f = nll(a, b)
    for it in range(1, max_iter + 1):
        p = expit(a * x + b)
        w = p * (1.0 - p)
        g = np.array([np.dot(p - y, x), np.sum(p - y)])
        H = np.array([[np.dot(w, x * x), np.dot(w, x)], [np.dot(w, x), np.sum(w)]])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g / max(np.trace(H), 1e-12)
        t = 1.0
        while True:
            na, nb = a - t * step[0], b - t * step[1]
            nf = nll(na, nb)
            if nf <= f or t < 1e-10:
                break
            t *= 0.5
        a, b, f = na, nb, nf
        if abs(a) > cap or abs(b) > cap:
            s = cap / max(abs(a), abs(b))
            return PlattScaling(a * s, b * s, converged=False, capped=True, n_iter=it)
        if np.max(np.abs(t * step)) < tol:
            return PlattScaling(a, b, converged=True, n_iter=it)
    raise UQError("NO_CONVERGENCE", f"Platt scaling did not converge in {max_iter} iterations")


def calibration_bins(confidences, correct, n_bins: int = 10) -> list:
    c = np.asarray(confidences, dtype=np.float64).ravel()
    y = np.asarray(correct, dtype=np.float64).ravel()
    if c.size == 0:
        raise UQError("EMPTY_INPUT", "no confidences")
    if c.shape != y.shape:
        raise UQError("SHAPE_MISMATCH", f"{c.shape} vs {y.shape}")
    if c.min() < 0 or c.max() > 1:
        raise UQError("OUT_OF_RANGE", "confidences must lie in [0, 1]")
    idx = np.minimum((c * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=c, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    bins = []
    for m in np.flatnonzero(counts):
        bins.append(CalibrationBin(m / n_bins, (m + 1) / n_bins, conf_sum[m] / counts[m],
                                   acc_sum[m] / counts[m], int(counts[m])))
    return bins


def ace(confidences, correct, n_bins: int = 10) -> float:
    """Average calibration error: every non-empty bin weighs the same."""
    bins = calibration_bins(confidences, correct, n_bins)
    return float(np.mean([abs(b.mean_confidence - b.accuracy) for b in bins]))


# ----------------------------------------------------------- ambiguity modeling


def rater_variance_map(raters: RaterSet, positive_class: int = 1) -> UncertaintyMap:
    if raters.n_raters < 2:
        raise UQError("NEEDS_RATERS", f"R={raters.n_raters}")
    y = (raters.masks == positive_class).astype(np.float64)
    return UncertaintyMap(y.var(axis=0), Measure.RATER_VARIANCE, UncertaintyType.AU)


def ncc(a, b, *, with_flag: bool = False):
    """Normalized cross-correlation with population standard deviations.

    A constant map has no defined correlation; 0 is returned and, with
    ``with_flag``, the flag ``ZERO_VARIANCE``.
    """
    a = a.data if isinstance(a, UncertaintyMap) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, UncertaintyMap) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UQError("SHAPE_MISMATCH", f"{a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.mean(da * da)))
    sb = math.sqrt(float(np.mean(db * db)))
    if sa == 0.0 or sb == 0.0:
        return (0.0, "ZERO_VARIANCE") if with_flag else 0.0
    v = float(np.mean(da * db) / (sa * sb))
    v = min(1.0, max(-1.0, v))
    return (v, None) if with_flag else v


def _mean_distance(d: np.ndarray, rng: Optional[np.random.Generator], n_draws: int) -> float:
    if rng is None:
        return float(d.mean())
    i = rng.integers(0, d.shape[0], n_draws)
    j = rng.integers(0, d.shape[1], n_draws)
    return float(d[i, j].mean())


def ged(pred_masks: Sequence, rater_masks: Sequence, positive_class: int = 1, *,
        enumerate_cap: int = 32, n_draws: int = 100_000, seed: int = 0,
        method: str = "auto") -> float:
    """Generalized energy distance with ``d = 1 - Dice``.

    Expectations are uniform averages over full cross products (self-pairs
    included) when both sets have at most ``enumerate_cap`` members, otherwise
    seeded Monte Carlo over ``n_draws`` pair draws per term.
    """
    if len(pred_masks) == 0 or len(rater_masks) == 0:
        raise UQError("EMPTY_SET", f"{len(pred_masks)} predictions, {len(rater_masks)} raters")
    if method not in ("auto", "exact", "mc"):
        raise UQError("CONFIG_INVALID", f"method={method!r}")
    exact = method == "exact" or (method == "auto" and max(len(pred_masks), len(rater_masks)) <= enumerate_cap)
    rng = None if exact else np.random.default_rng(seed)
    cross = _mean_distance(1.0 - pairwise_dice(rater_masks, pred_masks, positive_class), rng, n_draws)
    within_ref = _mean_distance(1.0 - pairwise_dice(rater_masks, rater_masks, positive_class), rng, n_draws)
    within_pred = _mean_distance(1.0 - pairwise_dice(pred_masks, pred_masks, positive_class), rng, n_draws)
    sq = 2.0 * cross - within_ref - within_pred
    return math.sqrt(max(sq, 0.0))


# -------------------------------------------------------------- active learning


def al_improvement(dice_t1_method: float, dice_t2_method: float,
                   dice_t1_random: float, dice_t2_random: float) -> float:
    """Relative Dice gain of uncertainty-driven querying minus that of random querying."""
    if dice_t1_method <= 0 or dice_t1_random <= 0:
        raise UQError("ZERO_BASELINE", "first-cycle Dice must be positive")
    c_method = (dice_t2_method - dice_t1_method) / dice_t1_method
    c_random = (dice_t2_random - dice_t1_random) / dice_t1_random
    return c_method - c_random


def sample_masks(stack: ProbabilityStack) -> list:
    """Per-sample argmax label maps (ties to the lowest class)."""
    return [np.argmax(s, axis=0).astype(np.uint8) for s in stack.data]
