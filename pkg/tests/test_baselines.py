import numpy as np
import pytest

from floodcast import baselines, synth
from floodcast.errors import ContractError
from floodcast.ingest import HourlyFrame, make_windows, split_windows
from floodcast.timefmt import HOUR, parse_time


def toy_frame(n=300, seed=0):
    rng = np.random.default_rng(seed)
    times = parse_time("2020-01-01T00:00:00Z") + np.arange(n) * HOUR
    stage = rng.uniform(1, 5, (n, 2))
    reported = np.full((n, 2), np.nan)
    return HourlyFrame(times, ["A", "B"], 0, stage, rng.exponential(size=n), reported)


def test_persistence_repeats_last_report():
    f = toy_frame(30)
    f.reported[:, 0] = np.arange(30.0)
    w = make_windows(f, T=3, h=2)
    assert w.origin[0] == 2 and baselines.Persistence().predict(w)[0] == 2.0
    f.reported[:3, 0] = [5.0, 6.0, 7.0]
    w = make_windows(f, T=3, h=2)
    assert baselines.Persistence().predict(w)[0] == 7.0


def test_linear_fits_realizable_target():
    f = toy_frame()
    # target discharge is an exact affine function of the window at t-h
    h, T = 2, 4
    coef = np.random.default_rng(1).normal(size=T * 3)
    w = make_windows(_fill(f, T, h, coef), T=T, h=h)
    fit = baselines.LinearBaseline().fit(w)
    assert np.mean(np.abs(fit.predict(w) - w.target_reported)) < 1e-8


def _fill(f, T, h, coef):
    feats = np.column_stack([f.stage, f.rainfall])
    for t in range(T - 1, len(f) - h):
        stage_block = f.stage[t - T + 1 : t + 1].ravel()
        rain_block = f.rainfall[t - T + 1 : t + 1]
        x = np.concatenate([stage_block, rain_block])
        f.reported[t + h, 0] = 3.0 + x @ coef
    f.reported[: T - 1 + h, 0] = 1.0
    return f


def test_unknown_kind_and_missing_graph():
    with pytest.raises(ContractError):
        baselines.make_baseline("arima")
    with pytest.raises(ContractError):
        baselines.make_baseline("plain_gru")


@pytest.mark.parametrize("kind", ["gbt", "mlp", "plain_gru", "dcrnn_direct"])
def test_learned_baselines_give_finite_forecasts(kind):
    r = synth.generate(synth.SynthScenario(seed=0, n_hours=60 * 24))
    w = make_windows(r.frame, T=12, h=1)
    tr, va, te = split_windows(w, len(r.frame))
    kw = {} if kind == "gbt" else dict(grid=[{"hidden_size": 4, "lr": 0.003}], T=12, max_epochs=2, patience=2)
    fc = baselines.make_baseline(kind, r.graph, **kw).fit(tr, va)
    pred = fc.predict(te)
    assert pred.shape == (len(te),) and np.isfinite(pred).all()
