import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floodcast.errors import BelowOffsetError, ContractError, DomainError, UncoveredPeriodError
from floodcast.rating_curve import (
    Piece, RatingCurveSet, Segment, load_curves, save_curves, to_flow, to_stage, two_piece_curve,
)

T0 = np.datetime64("2020-01-01T00:00:00", "s")
T1 = np.datetime64("2021-01-01T00:00:00", "s")


def single(a=2.0, h0=1.0, b=1.5):
    return RatingCurveSet("s", [Segment(None, None, [Piece(h0 + 1e-6, 100.0, h0, a, b)])])


def two_segments():
    return RatingCurveSet("s", [
        Segment(None, T1, [Piece(1.5, 50.0, 1.0, 2.0, 1.5)]),
        Segment(T1, None, [Piece(1.5, 50.0, 1.0, 3.0, 1.5)]),
    ])


def test_power_law_value():
    assert to_flow(5.0, T0, single()) == pytest.approx(16.0, abs=1e-12)


@pytest.mark.parametrize("a, b", [(0.7, 1.2), (5.0, 2.5), (40.0, 1.0)])
def test_unit_head_returns_a(a, b):
    assert to_flow(2.0, T0, single(a=a, b=b)) == pytest.approx(a, rel=1e-14)


def test_segment_selected_by_time():
    cs = two_segments()
    assert to_flow(5.0, T0, cs) == pytest.approx(16.0)
    assert to_flow(5.0, T1 + np.timedelta64(3600, "s"), cs) == pytest.approx(24.0)


def test_inverse_value():
    assert to_stage(16.0, T0, single()) == pytest.approx(5.0, abs=1e-12)


def test_errors():
    half = RatingCurveSet("s", [Segment(T1, None, [Piece(1.5, 50.0, 1.0, 2.0, 1.5)])])
    with pytest.raises(UncoveredPeriodError):
        to_flow(5.0, T0, half)
    with pytest.raises(BelowOffsetError):
        to_flow(1.0, T0, single())
    with pytest.raises(DomainError):
        to_stage(0.0, T0, single())
    with pytest.raises(ContractError):
        Segment(None, None, [Piece(1.5, 3.0, 1.0, 2.0, 1.5), Piece(3.0, 9.0, 1.0, 5.0, 1.5)])


def _configs():
    return [
        single(),
        two_segments(),
        RatingCurveSet("s", [
            Segment(None, T1, two_piece_curve(0.5, 10.0, 1.6, 6.0, 2.2, 0.6, 40.0)),
            Segment(T1, None, two_piece_curve(0.8, 12.0, 1.4, 7.0, 1.9, 0.9, 40.0)),
        ]),
    ]


@pytest.mark.parametrize("cs", _configs())
def test_roundtrip_1000_stages(cs):
    rng = np.random.default_rng(0)
    h = rng.uniform(1.5, 40.0, 1000)
    t = T0 + rng.integers(0, 2 * 365 * 24, 1000).astype("timedelta64[h]")
    q, _ = cs.flow(h, t)
    assert np.max(np.abs(cs.stage(q, t) - h)) < 1e-9


def test_piece_boundary_continuity():
    lower, upper = two_piece_curve(0.5, 10.0, 1.6, 6.0, 2.2, 0.6, 40.0)
    q = float(lower.flow(6.0))
    assert abs(float(lower.stage(q)) - float(upper.stage(q))) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(0.6, 39.0), st.floats(1e-3, 1.0))
def test_monotone_within_segment(h, dh):
    cs = _configs()[2]
    q1, q2 = cs.flow(np.array([h, h + dh]), T0)[0]
    assert q1 < q2


def test_same_curve_conversion_adds_no_reported_error():
    cs = _configs()[2]
    h = np.linspace(1.0, 30.0, 50)
    reported = cs.flow(h, T0)[0]
    np.testing.assert_array_equal(cs.flow(h, T0)[0], reported)


def test_extrapolation_flagged_and_floor():
    cs = single()
    _, ext = cs.flow(np.array([5.0, 150.0]), T0)
    assert ext.tolist() == [False, True]
    q, ext = cs.flow_floored(np.array([0.5, 5.0]), T0)
    assert ext.tolist() == [True, False] and q[0] > 0


def test_file_roundtrip(tmp_path):
    cs = _configs()[2]
    save_curves(tmp_path / "c.json", [cs])
    back = load_curves(tmp_path / "c.json")["s"]
    h = np.linspace(1.0, 30.0, 20)
    np.testing.assert_array_equal(back.flow(h, T1)[0], cs.flow(h, T1)[0])
