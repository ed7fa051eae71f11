import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from rcp.dgp import SyntheticSpec, gen_synthetic
from rcp.forest import (
    ForestParams,
    fit_mean,
    fit_quantile,
    predict_mean,
    predict_quantile,
    predict_quantiles,
)

ONE_LEAF = dict(n_trees=1, bootstrap_rows=False)


def test_constant_targets():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (60, 2))
    y = np.full(60, 3.25)
    p = ForestParams(n_trees=10, seed=1)
    m, q = fit_mean(x, y, p), fit_quantile(x, y, p)
    probe = rng.uniform(-3, 3, (20, 2))
    np.testing.assert_array_equal(predict_mean(m, probe), 3.25)
    for beta in (0.01, 0.5, 0.99):
        np.testing.assert_array_equal(predict_quantile(q, probe, beta), 3.25)


def test_single_leaf_mean_and_quantiles():
    x = np.array([[0.0], [1.0], [2.0]])
    m = fit_mean(x, [1.0, 2.0, 3.0], ForestParams(min_leaf=3, **ONE_LEAF))
    assert predict_mean(m, np.array([0.4])) == 2.0
    q = fit_quantile(np.arange(4.0)[:, None], [3.0, 1.0, 4.0, 2.0], ForestParams(min_leaf=4, **ONE_LEAF))
    assert predict_quantile(q, np.array([1.0]), 0.5) == 2.0
    assert predict_quantile(q, np.array([1.0]), 0.25) == 1.0
    assert predict_quantile(q, np.array([1.0]), 0.999) == 4.0


def test_learns_identity_better_than_constant():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (500, 1))
    y = x.ravel()
    m = fit_mean(x, y, ForestParams(seed=2))
    mse_forest = np.mean((predict_mean(m, x) - y) ** 2)
    mse_const = np.mean((y.mean() - y) ** 2)
    assert mse_forest < mse_const


def test_same_seed_same_predictions():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(200, 3))
    y = x[:, 0] + rng.normal(size=200)
    p = ForestParams(n_trees=20, seed=42)
    probe = rng.normal(size=(30, 3))
    a, b = fit_quantile(x, y, p), fit_quantile(x, y, p)
    np.testing.assert_array_equal(predict_quantiles(a, probe, [0.1, 0.9]), predict_quantiles(b, probe, [0.1, 0.9]))
    np.testing.assert_array_equal(predict_mean(fit_mean(x, y, p), probe), predict_mean(fit_mean(x, y, p), probe))
    c = fit_mean(x, y, ForestParams(n_trees=20, seed=43))
    assert not np.array_equal(predict_mean(c, probe), predict_mean(fit_mean(x, y, p), probe))


def test_outside_hull_stays_in_target_range():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (100, 1))
    y = 5 * x.ravel() + rng.normal(size=100)
    m = fit_mean(x, y, ForestParams(n_trees=15, seed=0))
    pred = predict_mean(m, np.array([[-50.0], [50.0]]))
    assert np.all((pred >= y.min()) & (pred <= y.max()))


def test_heteroscedastic_upper_quantile_grows_with_abs_x():
    rng = np.random.default_rng(2024)
    x = rng.uniform(-1, 1, (2000, 1))
    y = x.ravel() * rng.standard_normal(2000)
    q = fit_quantile(x, y, ForestParams(n_trees=100, min_leaf=20, seed=1))
    grid = np.linspace(-1, 1, 41)[:, None]
    q95 = predict_quantile(q, grid, 0.95)
    assert spearmanr(np.abs(grid.ravel()), q95).statistic > 0.8


def test_errors():
    x = np.zeros((3, 2))
    with pytest.raises(ValueError, match="min_leaf"):
        fit_mean(x, [1, 2, 3], ForestParams(min_leaf=5))
    with pytest.raises(ValueError, match="dimension mismatch"):
        fit_mean(x, [1, 2], ForestParams(min_leaf=1))
    m = fit_quantile(np.arange(10.0)[:, None], np.arange(10.0), ForestParams(n_trees=3, min_leaf=2))
    with pytest.raises(ValueError, match="dimension mismatch"):
        predict_quantile(m, np.zeros(2), 0.5)
    for beta in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="beta"):
            predict_quantile(m, np.zeros(1), beta)
    with pytest.raises(ValueError):
        ForestParams(min_leaf="big")


def test_auto_min_leaf():
    p = ForestParams(min_leaf="auto")
    assert p.resolved_min_leaf(8) == 5
    assert p.resolved_min_leaf(1000) == 100
    assert ForestParams(min_leaf=7).resolved_min_leaf(1000) == 7


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), betas=st.lists(st.floats(0.01, 0.99), min_size=2, max_size=6))
def test_quantiles_monotone_and_bounded(seed, betas):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(80, 2))
    y = rng.standard_t(3, size=80) + x[:, 1]
    q = fit_quantile(x, y, ForestParams(n_trees=8, min_leaf=3, seed=seed))
    probe = rng.normal(scale=2, size=(15, 2))
    betas = np.sort(betas)
    out = predict_quantiles(q, probe, betas)
    assert np.all(np.diff(out, axis=1) >= 0)
    assert np.all((out >= y.min()) & (out <= y.max()))
    w = q.forest.weights(probe)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_mean_error_shrinks_with_n():
    def avg_mse(n):
        errs = []
        for rep in range(50):
            s = gen_synthetic(SyntheticSpec.from_seed(n, 1, 0.0, seed=rep))
            ds = s.dataset
            arm = ds.arm(0)
            m = fit_mean(ds.covariates[arm], ds.outcome[arm], ForestParams(n_trees=30, min_leaf="auto", seed=rep))
            grid = np.linspace(-0.95, 0.95, 50)[:, None]
            errs.append(np.mean((predict_mean(m, grid) - s.f0(grid)) ** 2))
        return np.mean(errs)

    assert avg_mse(2000) < avg_mse(200)
