import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from statsmodels.nonparametric.smoothers_lowess import lowess as sm_lowess

from floodcast.lowess import LowessCurve, lowess
from floodcast.trees import BootstrapEnsemble, GradientBoostedTrees, RegressionTree, best_split


def _brute_split(X, y, min_leaf):
    best = (np.sum((y - y.mean()) ** 2), None, None)
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (lo + hi)
            left = X[:, j] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            sse = np.sum((y[left] - y[left].mean()) ** 2) + np.sum((y[~left] - y[~left].mean()) ** 2)
            if sse < best[0] - 1e-12:
                best = (sse, j, thr)
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 25))
def test_best_split_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, size=(n, 2)).astype(float)
    y = rng.normal(size=n)
    sse, j, thr = _brute_split(X, y, 2)
    got = best_split(X, y, 2)
    if j is None:
        assert got is None
    else:
        assert got is not None
        gj, gthr = got
        left = X[:, gj] <= gthr
        gsse = np.sum((y[left] - y[left].mean()) ** 2) + np.sum((y[~left] - y[~left].mean()) ** 2)
        assert gsse == pytest.approx(sse, abs=1e-9)


def test_constant_target_fitted_exactly():
    X = np.random.default_rng(0).normal(size=(20, 2))
    gbt = GradientBoostedTrees().fit(X, np.full(20, 4.2))
    np.testing.assert_allclose(gbt.predict(np.random.default_rng(1).normal(size=(7, 2))), 4.2, atol=1e-12)


def test_step_function_shrinks_geometrically():
    x = np.linspace(0.0, 10.0, 40)
    y = np.where(x < 5.0, 1.0, 3.0)
    X = x[:, None]
    # each stump captures the step exactly, so the residual scales by (1 - lr) per tree
    gbt = GradientBoostedTrees(n_estimators=50, learning_rate=0.1, max_depth=3).fit(X, y)
    expected = y.mean() + (1 - 0.9**50) * (y - y.mean())
    np.testing.assert_allclose(gbt.predict(X), expected, atol=1e-12)
    full = GradientBoostedTrees(n_estimators=1, learning_rate=1.0, max_depth=1).fit(X, y)
    probe = np.array([[1.0], [4.0], [6.0], [9.0]])
    np.testing.assert_allclose(full.predict(probe), [1.0, 1.0, 3.0, 3.0], atol=1e-6)


def test_tree_respects_min_leaf_and_depth():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    tree = RegressionTree(max_depth=2, min_samples_leaf=5).fit(X, rng.normal(size=50))
    leaves = tree.predict(X)
    _, counts = np.unique(leaves, return_counts=True)
    assert counts.min() >= 5 and len(counts) <= 4


def test_bootstrap_ensemble_deterministic_and_averaged():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    a = BootstrapEnsemble(n_bootstrap=4, n_estimators=5, seed=3).fit(X, y)
    b = BootstrapEnsemble(n_bootstrap=4, n_estimators=5, seed=3).fit(X, y)
    assert a.predict(X).tobytes() == b.predict(X).tobytes()
    np.testing.assert_allclose(a.predict(X), np.mean([m.predict(X) for m in a.members], axis=0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 80), st.sampled_from([0.2, 0.3, 0.5, 0.8, 1.0]))
def test_lowess_matches_statsmodels(seed, n, frac):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 10, n)
    y = np.sin(x) + rng.normal(scale=0.3, size=n)
    xs, fitted = lowess(x, y, frac, 0)
    ref = sm_lowess(y, x, frac=frac, it=0, delta=0.0, return_sorted=True)
    np.testing.assert_allclose(xs, ref[:, 0])
    np.testing.assert_allclose(fitted, ref[:, 1], atol=1e-8)


def test_lowess_robustness_pass_matches_statsmodels_on_outlier():
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0, 10, 40))
    y = 0.5 * x + rng.normal(scale=0.1, size=40)
    y[20] += 5.0
    _, robust = lowess(x, y, 0.5, 2)
    _, plain = lowess(x, y, 0.5, 0)
    ref = sm_lowess(y, x, frac=0.5, it=2, delta=0.0)[:, 1]
    np.testing.assert_allclose(robust, ref, atol=1e-8)
    assert abs(robust[20] - 0.5 * x[20]) < abs(plain[20] - 0.5 * x[20])


def test_lowess_affine_exactness():
    x = np.random.default_rng(0).uniform(0, 5, 30)
    curve = LowessCurve.fit(x, 2.0 * x - 1.0)
    np.testing.assert_allclose(curve(x), 2.0 * x - 1.0, atol=1e-8)
    assert curve(-100.0) == pytest.approx(curve.y[0]) and curve(100.0) == pytest.approx(curve.y[-1])
