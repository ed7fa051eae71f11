import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcp.conformal import (
    FittedArm,
    calibrate,
    conformal_offset,
    conformity_score,
    fit_arm,
    fit_arms,
    predict_interval,
    to_width_form,
)
from rcp.data import split
from rcp.forest import ForestParams, MeanModel, QuantileModel, fit_forest

X = np.linspace(0, 1, 20)[:, None]


def _constant(c):
    return fit_forest(X, np.full(X.shape[0], float(c)), ForestParams(n_trees=2, min_leaf=2))


def constant_arm(mu, lo, hi, offset=0.0):
    return FittedArm(0, MeanModel(_constant(mu)), QuantileModel(_constant(lo)), QuantileModel(_constant(hi)), 0.1, offset)


@pytest.mark.parametrize("y, expected", [(0.5, 0.0), (1.5, 0.5), (-2.0, 2.0)])
def test_score(y, expected):
    assert conformity_score(y, 0.0, 1.0) == expected


def test_offset_rank_rule():
    assert conformal_offset(np.zeros(30), 0.1) == (0.0, False)
    assert conformal_offset(np.arange(1, 10), 0.1) == (9.0, False)
    assert conformal_offset([5.0, 1.0, 4.0, 2.0, 3.0], 0.1) == (5.0, True)
    # ceil(20 * 0.9) = 18 -> 18th smallest of 1..19
    assert conformal_offset(np.arange(19, 0, -1), 0.1) == (18.0, False)
    with pytest.raises(ValueError, match="empty"):
        conformal_offset([], 0.1)


def test_capped_calibration_warns(caplog):
    arm = fit_arm(X, X.ravel(), 0, 0.1, ForestParams(n_trees=3, min_leaf=2))
    with caplog.at_level(logging.WARNING):
        cal = calibrate(X[:5], X[:5].ravel() + 1.0, arm)
    assert cal.warnings and "too few" in cal.warnings[0]
    assert "too few" in caplog.text


def test_interval_adds_offset():
    arm = constant_arm(0.5, 0.0, 1.0, offset=0.2)
    lo, hi = predict_interval(arm, np.array([0.3]))
    assert (lo, hi) == pytest.approx((-0.2, 1.2), abs=1e-15)
    assert predict_interval(constant_arm(0.5, 0.0, 1.0), np.array([0.3])) == (0.0, 1.0)


def test_width_form_and_clamp():
    w = to_width_form(constant_arm(0.5, 0.0, 1.0), np.array([0.1]))
    assert (w.mu_hat, w.l, w.u, w.clamped) == (0.5, 0.5, 0.5, False)
    w = to_width_form(constant_arm(1.5, 0.0, 1.0), np.array([0.1]))
    assert (w.mu_hat, w.l, w.u, w.clamped) == (1.5, 1.5, 0.0, True)
    # the reconstructed interval keeps the CQR side that the mean did not cross
    assert w.lower == 0.0 and w.upper == 1.5


def test_uncalibrated_and_empty():
    arm = fit_arm(X, X.ravel(), 1, 0.1, ForestParams(n_trees=2, min_leaf=2))
    assert not arm.calibrated
    with pytest.raises(ValueError, match="not calibrated"):
        predict_interval(arm, X)
    with pytest.raises(ValueError, match="empty calibration"):
        calibrate(X[:0], [], arm)


def test_fixed_model_split_conformal_coverage():
    # quantile models fixed at 0, so the interval is [-offset, offset]
    rng = np.random.default_rng(17)
    reps, m, n_test = 4000, 39, 20
    hits = 0
    for _ in range(reps):
        scores = np.abs(rng.standard_normal(m))
        q, _ = conformal_offset(scores, 0.1)
        hits += np.count_nonzero(np.abs(rng.standard_normal(n_test)) <= q)
    cov = hits / (reps * n_test)
    se = math.sqrt(0.9 * 0.1 / reps)  # reps are the independent units here
    assert cov >= 0.9 - 3 * se


def test_calibration_uses_own_arm_only(small_ds):
    plan = split(small_ds, 0.2, seed=0)
    params = ForestParams(n_trees=10, min_leaf="auto", seed=0)
    a0, a1 = fit_arms(small_ds, plan, 0.1, params)
    cal = plan.calib_indices
    for arm in (a0, a1):
        rows = cal[small_ds.treatment[cal] == arm.arm]
        lo, hi = arm._quantiles(small_ds.covariates[rows])
        expected, _ = conformal_offset(conformity_score(small_ds.outcome[rows], lo, hi), 0.1)
        assert arm.offset == expected


@settings(max_examples=60, deadline=None)
@given(
    scores=st.lists(st.floats(0, 100), min_size=1, max_size=60),
    a=st.floats(0.01, 0.99),
    b=st.floats(0.01, 0.99),
)
def test_offset_monotone_in_alpha(scores, a, b):
    lo, hi = sorted((a, b))
    assert conformal_offset(scores, hi)[0] <= conformal_offset(scores, lo)[0]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), shift=st.floats(-5, 5))
def test_width_form_nonnegative(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (60, 1))
    y = np.sin(3 * x.ravel()) + rng.standard_normal(60)
    arm = fit_arm(x[:45], y[:45], 0, 0.2, ForestParams(n_trees=5, min_leaf=3, seed=seed))
    arm = calibrate(x[45:], y[45:] + shift, arm)
    w = to_width_form(arm, rng.uniform(-2, 2, (25, 1)))
    assert np.all(w.l >= 0) and np.all(w.u >= 0)
    lo, hi = predict_interval(arm, rng.uniform(-2, 2, (25, 1)))
    assert np.all(lo <= hi)
