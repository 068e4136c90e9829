import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from floodcast import metrics as M
from floodcast.errors import ContractError


def test_perfect_forecast():
    y = np.array([1.0, 3.0, 2.0, 5.0])
    r = M.compute_scalar_metrics(y, y)
    assert (r.mae, r.rmse, r.bias, r.nse, r.cc) == (0.0, 0.0, 0.0, 1.0, 1.0)


def test_mean_forecast_has_zero_nse():
    y = np.random.default_rng(0).normal(size=200)
    assert abs(M.nse(y, np.full_like(y, y.mean()))) < 1e-12


def test_hand_example():
    r = M.compute_scalar_metrics([1, 2, 3], [1, 2, 4])
    assert r.mae == pytest.approx(1 / 3)
    assert r.rmse == pytest.approx(math.sqrt(1 / 3))
    assert r.bias == pytest.approx(1 / 3)
    assert r.nse == pytest.approx(0.5)


def test_constant_observations_leave_nse_missing():
    assert M.nse([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) is None


def test_mape_excludes_zero_targets():
    value, excluded = M.mape([0.0, 10.0, 20.0], [5.0, 11.0, 18.0])
    assert excluded == 1 and value == pytest.approx(10.0)


def test_length_mismatch():
    with pytest.raises(ContractError):
        M.mae([1, 2], [1, 2, 3])


def test_events():
    assert M.extract_flood_events(np.zeros(20), 1.0) == []
    s = np.zeros(30)
    s[5:15] = 2.0
    assert M.extract_flood_events(s, 1.0) == [(5, 15)]
    s[18:22] = 2.0
    assert M.extract_flood_events(s, 1.0) == [(5, 22)]
    s[:] = 0
    s[2:4] = 2.0
    s[10:12] = 2.0
    assert M.extract_flood_events(s, 1.0) == [(2, 4), (10, 12)]


def test_peak_metrics_examples():
    y = np.array([10.0, 20.0, 10.0])
    p = M.peak_metrics(y, y, [(0, 3)])[0]
    assert (p.peak_bias, p.peak_pct_bias, p.peak_time_bias) == (0.0, 0.0, 0.0)
    p = M.peak_metrics(y, np.array([12.0, 24.0, 12.0]), [(0, 3)])[0]
    assert p.peak_bias == pytest.approx(8 / 3)
    assert p.peak_pct_bias == pytest.approx(20.0)
    y = np.zeros(24)
    f = np.zeros(24)
    y[12], f[14] = 5.0, 5.0
    assert M.peak_metrics(y, f, [(0, 24)])[0].peak_time_bias == 2.0
    with pytest.raises(ContractError):
        M.peak_metrics(y, f, [])


def test_evaluate_reports_events():
    stage = np.zeros(50)
    stage[10:20] = 3.0
    y = np.arange(50.0) + 1
    r = M.evaluate(y, y, stage, 1.0)
    assert r.n_flood_events == 1 and r.peak_bias == 0.0


pairs = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        arrays(float, n, elements=st.floats(-1e3, 1e3)),
        arrays(float, n, elements=st.floats(-1e3, 1e3)),
    )
)


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_rmse_bounds_mae(pair):
    y, f = pair
    assert M.rmse(y, f) >= M.mae(y, f) - 1e-9 * max(1.0, M.mae(y, f))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_cc_affine_invariant_nse_not(seed, scale, shift):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=30)
    f = y + rng.normal(scale=0.5, size=30)
    assert M.cc(y, scale * f + shift) == pytest.approx(M.cc(y, f), abs=1e-12)
    assert M.nse(y, f) <= 1.0
    if abs(scale - 1) > 0.05 or abs(shift) > 0.05:
        assert M.nse(y, scale * f + shift) != pytest.approx(M.nse(y, f), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(pairs, pairs)
def test_pooled_mae_and_bias(a, b):
    y = np.concatenate([a[0], b[0]])
    f = np.concatenate([a[1], b[1]])
    na, nb = len(a[0]), len(b[0])
    assert M.mae(y, f) == pytest.approx((na * M.mae(*a) + nb * M.mae(*b)) / (na + nb), rel=1e-12, abs=1e-9)
    assert M.bias(y, f) == pytest.approx((na * M.bias(*a) + nb * M.bias(*b)) / (na + nb), rel=1e-12, abs=1e-9)
