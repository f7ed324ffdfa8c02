import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from seguq.core import ProbabilityStack, RaterSet, UQError
from seguq.metrics import (
    ace,
    al_improvement,
    aurc,
    auroc,
    calibration_bins,
    dice,
    e_aurc,
    ged,
    mean_rater_dice,
    ncc,
    pairwise_dice,
    platt_scale,
    rater_variance_map,
    risk_coverage_curve,
    sample_masks,
)


def onehot_stack(labels, C=2):
    labels = np.asarray(labels)
    return ProbabilityStack(np.moveaxis(np.eye(C)[labels], -1, 1))


# ------------------------------------------------------------------ dice


def test_dice_cases():
    a = np.array([[1, 1, 0, 0]])
    assert dice(a, a) == 1.0
    assert dice(a, 1 - a) == 0.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    ref = np.array([1, 1, 1, 0, 0])
    pred = np.array([1, 1, 1, 1, 0])
    assert dice(pred, ref) == pytest.approx(6 / 7)
    with pytest.raises(UQError):
        dice(np.zeros(3), np.zeros(4))


@given(st.integers(0, 2**32 - 1))
def test_dice_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, (2, 4, 5))
    assert dice(a, b) == pytest.approx(oracles.dice_sets(a, b), abs=1e-15)
    assert np.allclose(pairwise_dice([a, b], [b]), [[oracles.dice_sets(a, b)], [1.0]])


def test_mean_rater_dice():
    r1 = np.array([[1, 1, 0, 0]])
    r2 = np.array([[0, 0, 1, 1]])
    assert mean_rater_dice(onehot_stack(r1[None]), RaterSet(np.stack([r1, r1]))) == 1.0
    assert mean_rater_dice(onehot_stack(r1[None]), RaterSet(np.stack([r1, r2]))) == 0.5
    raters = np.random.default_rng(0).integers(0, 2, (4, 3, 3))
    pred = raters[0]
    expected = np.mean([oracles.dice_sets(pred, r) for r in raters])
    assert mean_rater_dice(onehot_stack(pred[None]), RaterSet(raters)) == pytest.approx(expected)


# ------------------------------------------------------------------ AUROC


def test_auroc_worked():
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert oracles.auroc_pairs(scores, labels) == 0.75
    assert auroc(scores, labels) == 0.75


@pytest.mark.parametrize("scores, labels, expected", [
    ([0, 1, 2, 3], [0, 0, 1, 1], 1.0),
    ([3, 3, 3, 3], [0, 1, 0, 1], 0.5),
    ([3, 2, 1], [1, 0, 0], 1.0),
])
def test_auroc_edges(scores, labels, expected):
    assert auroc(scores, labels) == expected


def test_auroc_single_class():
    with pytest.raises(UQError) as e:
        auroc([1, 2], [1, 1])
    assert e.value.code == "SINGLE_CLASS"


@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_auroc_matches_pair_counting(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 6, n).astype(float)  # coarse grid forces ties
    assert auroc(scores, labels) == oracles.auroc_pairs(scores.tolist(), labels.tolist())


@given(st.integers(0, 2**32 - 1))
def test_auroc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    labels = np.r_[0, 1, rng.integers(0, 2, 28)]
    assert auroc(np.exp(3 * scores) + 2, labels) == auroc(scores, labels)


# ------------------------------------------------------------------- AURC


def test_aurc_worked():
    c, r = [3, 2, 1], [0, 0.5, 1.0]
    assert oracles.aurc_thresholds(c, r) == pytest.approx(1 / 6, abs=1e-15)
    assert aurc(c, r) == pytest.approx(1 / 6, abs=1e-12)
    assert e_aurc(c, r) == pytest.approx(0.0, abs=1e-15)


def test_aurc_zero_risk():
    assert aurc([5, 3, 1, 0], [0, 0, 0, 0]) == 0.0


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_aurc_constant_risk(n):
    r = 0.3
    c = np.arange(n, dtype=float)
    assert aurc(c, np.full(n, r)) == pytest.approx(r, abs=1e-15)
    assert aurc(np.zeros(n), np.full(n, r)) == pytest.approx(r, abs=1e-15)


def test_risk_coverage_curve_groups_ties_and_starts_at_full_coverage():
    pts = risk_coverage_curve([1, 2, 2, 3], [0.4, 0.2, 0.0, 0.1])
    assert [p.coverage for p in pts] == [1.0, 0.75, 0.25]
    assert pts[1].selective_risk == pytest.approx(0.1)
    with pytest.raises(UQError) as e:
        risk_coverage_curve([], [])
    assert e.value.code == "EMPTY_INPUT"


def test_e_aurc_oracle_and_anti_oracle():
    r = np.array([0.0, 1.0])
    assert e_aurc(-r, r) == 0.0
    anti = e_aurc(r, r)
    assert anti == pytest.approx(oracles.e_aurc_thresholds(r.tolist(), r.tolist()))
    # anti-oracle: 1/2 * 1 + 1/2 * (1 + 1/2)/2; oracle: 1/2 * 0 + 1/2 * (0 + 1/2)/2
    assert anti == pytest.approx(0.875 - 0.125)
    for c in ([0.0, 1.0], [1.0, 1.0]):
        assert e_aurc(c, r) <= anti


aurc_instances = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 5), min_size=n, max_size=n),
    st.lists(st.sampled_from([0.0, 0.125, 0.25, 0.5, 0.75, 1.0]), min_size=n, max_size=n)))


@given(aurc_instances)
def test_aurc_matches_threshold_oracle(inst):
    c, r = inst
    assert aurc(c, r) == pytest.approx(oracles.aurc_thresholds(c, r), abs=1e-12)
    assert e_aurc(c, r) == pytest.approx(oracles.e_aurc_thresholds(c, r), abs=1e-12)


distinct_instances = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.permutations(list(range(n))),
    st.lists(st.sampled_from([0.0, 0.125, 0.25, 0.5, 0.75, 1.0]), min_size=n, max_size=n)))


@given(distinct_instances)
def test_e_aurc_nonnegative_and_zero_iff_risks_sorted(inst):
    c, r = inst
    v = e_aurc(c, r)
    assert v >= -1e-12
    rs = np.asarray(r)[np.argsort(-np.asarray(c))]
    if np.all(np.diff(rs) >= 0):
        assert v == pytest.approx(0.0, abs=1e-12)
    else:
        assert v > 1e-12


@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=1, max_size=6))
def test_ascending_risk_is_the_best_ordering(r):
    assert oracles.best_ordering_aurc(r) == pytest.approx(oracles.best_ordering_aurc(r, exhaustive=True), abs=1e-15)


def test_equal_risks_do_not_inflate_e_aurc():
    assert e_aurc([0, 1, 2], [0.125, 0.125, 0.0]) == pytest.approx(0.0, abs=1e-15)


def test_tied_confidences_can_undercut_the_oracle():
    # a tie group is one straight segment; the oracle's finer curve can bend above it
    c = [1.0, 1.0, 1.0, 2.0]
    r = [0.5, 0.25, 0.5, 0.0]
    assert e_aurc(c, r) < 0
    assert e_aurc(c, r) == pytest.approx(oracles.e_aurc_thresholds(c, r), abs=1e-15)


# ------------------------------------------------------------ calibration


def test_platt_two_group_closed_form():
    # scores equal to each group's empirical accuracy; the fit is exact at both groups
    x = np.r_[np.full(100, 0.2), np.full(100, 0.8)]
    y = np.r_[np.arange(100) < 20, np.arange(100) < 80].astype(float)
    fit = platt_scale(x, y)
    assert fit.converged and not fit.capped
    assert fit(np.array([0.2, 0.8])) == pytest.approx([0.2, 0.8], abs=1e-3)


def test_platt_independent_labels_give_base_rate():
    rng = np.random.default_rng(4)
    x = rng.random(4000)
    y = (np.arange(4000) % 4 == 0).astype(float)
    rng.shuffle(y)
    fit = platt_scale(x, y)
    assert abs(fit.a) < 0.3
    assert fit(0.5) == pytest.approx(0.25, abs=0.02)


def test_platt_separated_data_is_capped():
    fit = platt_scale([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert fit.capped and fit.flags == ["CONVERGENCE_CAPPED"]
    assert fit(0.15) < 1e-6 and fit(0.85) > 1 - 1e-6


def test_platt_errors():
    with pytest.raises(UQError) as e:
        platt_scale([0.1, 0.2], [1, 1])
    assert e.value.code == "SINGLE_CLASS"
    rng = np.random.default_rng(0)
    x = rng.random(200)
    y = (rng.random(200) < x).astype(float)
    with pytest.raises(UQError) as e:
        platt_scale(x, y, max_iter=1, tol=0.0)
    assert e.value.code == "NO_CONVERGENCE"


@given(st.integers(0, 2**32 - 1))
def test_platt_reaches_likelihood_stationarity(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=300)
    y = (rng.random(300) < 1 / (1 + np.exp(-(1.5 * x - 0.3)))).astype(float)
    if len(set(y)) < 2:
        return
    fit = platt_scale(x, y)
    if fit.capped:
        return
    p = fit(x)
    assert abs(np.dot(p - y, x)) < 1e-5 and abs(np.sum(p - y)) < 1e-5


def test_ace_worked():
    assert ace(np.ones(10), np.arange(10) % 2) == 0.5
    c = np.r_[np.full(10, 0.2), np.full(10, 0.9)]
    y = np.r_[np.arange(10) < 2, np.arange(10) < 7]
    assert ace(c, y) == pytest.approx((0 + 0.2) / 2)


def test_ace_zero_when_bins_calibrated():
    c = np.repeat([0.05, 0.25, 0.55, 0.85], 20)
    y = np.concatenate([np.arange(20) < k for k in (1, 5, 11, 17)])
    assert ace(c, y) == pytest.approx(0.0, abs=1e-12)


def test_calibration_bins_only_non_empty():
    bins = calibration_bins([0.0, 0.05, 1.0], [1, 0, 1], n_bins=10)
    assert [(b.lower, b.count) for b in bins] == [(0.0, 2), (0.9, 1)]
    with pytest.raises(UQError):
        calibration_bins([1.2], [1])
    with pytest.raises(UQError) as e:
        ace([], [])
    assert e.value.code == "EMPTY_INPUT"


# ------------------------------------------------------ ambiguity modeling


def test_rater_variance():
    agree = RaterSet(np.ones((3, 2, 2), dtype=np.uint8))
    assert (rater_variance_map(agree).data == 0).all()
    two = RaterSet(np.array([[[0]], [[1]]], dtype=np.uint8))
    assert rater_variance_map(two).data.item() == 0.25
    four = RaterSet(np.array([[[1]], [[1]], [[1]], [[0]]], dtype=np.uint8))
    assert rater_variance_map(four).data.item() == pytest.approx(np.var([1, 1, 1, 0]))
    assert rater_variance_map(four).data.item() == 3 / 16
    with pytest.raises(UQError) as e:
        rater_variance_map(RaterSet(np.ones((1, 2, 2), dtype=np.uint8)))
    assert e.value.code == "NEEDS_RATERS"


def test_ncc_cases():
    a = np.array([0.0, 1.0, 0.0])
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 2 * a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, np.ones(3), with_flag=True) == (0.0, "ZERO_VARIANCE")
    with pytest.raises(UQError):
        ncc(a, np.ones(4))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-10, 10))
def test_ncc_affine_invariance_and_symmetry(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 5, 5))
    assert ncc(a, alpha * a + beta) == pytest.approx(1.0, abs=1e-9)
    assert ncc(a, b) == pytest.approx(ncc(b, a), abs=1e-15)
    assert ncc(a, b) == pytest.approx(oracles.pearson(a.ravel().tolist(), b.ravel().tolist()), abs=1e-12)


def _two_masks_with_half_dice():
    A = np.array([[1, 1, 0, 0]])
    B = np.array([[0, 1, 1, 0]])
    assert dice(A, B) == 0.5
    return A, B


def test_ged_worked():
    A, B = _two_masks_with_half_dice()
    assert oracles.ged_enumerate([A], [A, B]) == pytest.approx(0.5)
    assert ged([A], [A, B]) == pytest.approx(0.5, abs=1e-12)
    assert ged([A, B], [B, A]) == 0.0
    assert ged([A], [1 - A]) == pytest.approx(math.sqrt(2))
    with pytest.raises(UQError) as e:
        ged([], [A])
    assert e.value.code == "EMPTY_SET"


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_ged_matches_enumeration(n_pred, n_rater, seed):
    rng = np.random.default_rng(seed)
    preds = list(rng.integers(0, 2, (n_pred, 3, 4)))
    raters = list(rng.integers(0, 2, (n_rater, 3, 4)))
    assert ged(preds, raters) == pytest.approx(oracles.ged_enumerate(preds, raters), abs=1e-12)


def test_ged_monte_carlo_above_cap():
    rng = np.random.default_rng(9)
    preds = list(rng.random((40, 6, 6)) < 0.5)
    raters = list(rng.random((3, 6, 6)) < 0.4)
    exact = ged(preds, raters, method="exact")
    assert ged(preds, raters) != exact  # 40 > 32 switches to sampling
    mc = ged(preds, raters, seed=1)
    assert mc == pytest.approx(exact, abs=0.02)
    assert ged(preds, raters, seed=1) == mc


def test_al_improvement():
    assert al_improvement(0.6, 0.66, 0.6, 0.66) == 0.0
    assert al_improvement(0.6, 0.66, 0.6, 0.63) == pytest.approx(0.05)
    assert al_improvement(0.6, 0.5, 0.6, 0.7) < 0
    with pytest.raises(UQError) as e:
        al_improvement(0.0, 0.5, 0.6, 0.7)
    assert e.value.code == "ZERO_BASELINE"


def test_sample_masks():
    s = onehot_stack(np.array([[[0, 1]], [[1, 1]]]))
    assert [m.tolist() for m in sample_masks(s)] == [[[0, 1]], [[1, 1]]]
