"""Residual-error cascade applied to base discharge forecasts.

All series are aligned on the hourly target-time grid: element ``i`` of every
array refers to the same timestamp, forecasts being issued ``h`` hours before.
Missing values are NaN.

Order of corrections:

1. ``ar_correct``: online regression of the reported-space error on its value
   ``h`` hours earlier.
2. Stage 1: percentage error regressed on the forecast stage change, fitted on
   high, fast-rising measured points only.
3. Stage 2: LOWESS of the remaining percentage error against forecast stage.
4. Stage 3: bagged boosted trees on the absolute residual.

Stages 1-2 are scaled by confidence indices ``c = MAPE_x / (MAPE_x + MAPE_reported)``
where ``MAPE_x`` is the current forecast's error (against measured flow by
default, against reported flow with ``confidence_reference="reported"``) and
``MAPE_reported`` the reported flow's error against field measurements, all at
measured fit points.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .lowess import LowessCurve
from .timefmt import format_time
from .trees import BootstrapEnsemble

log = logging.getLogger(__name__)

VAR_RTOL = 1e-8


@dataclass
class ResidualConfig:
    w_action: float = 9.0
    enable_ar: bool = True
    enable_stage1: bool = True
    enable_stage2: bool = True
    enable_stage3: bool = True
    lowess_frac: float = 0.5
    lowess_iterations: int = 2
    n_bootstrap: int = 20
    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 2
    # winsorize the stage-3 target to these tail quantiles (0 disables)
    target_clip_quantile: float = 0.05
    clamp_min: float = 0.01
    seed: int = 0
    # series the forecast's MAPE is taken against in c1/c2: "reported" or "measured"
    confidence_reference: str = "measured"


def _mape(ref, x):
    return float(100.0 * np.mean(np.abs((ref - x) / ref)))


def _forecast_mape(x, reported, measured, reference):
    if reference == "reported":
        return _mape(reported, x)
    if reference == "measured":
        return _mape(measured, x)
    raise ContractError(f"confidence reference must be 'reported' or 'measured', got {reference!r}")


def confidence_index(mape_forecast, mape_reported) -> float:
    """``MAPE_forecast / (MAPE_forecast + MAPE_reported)``; 0 when both vanish."""
    total = mape_forecast + mape_reported
    return float(mape_forecast / total) if total > 0 else 0.0


# --- autoregressive correction ------------------------------------------------


@dataclass
class ARState:
    rho: np.ndarray  # coefficient in force when correcting each target time
    b: np.ndarray
    n_pairs: np.ndarray
    fallback: np.ndarray


def ar_correct(forecasts, reported, h):
    """Add the predicted reported-space error to each forecast.

    For the forecast of time ``t + h`` issued at ``t``, the error model is the
    least-squares line of ``e_s`` on ``e_{s-h}`` over all ``s <= t``, where
    ``e_s = reported_s - forecast_s``. With fewer than two pairs or a constant
    regressor the slope is 0 and the intercept is the mean error so far.
    Returns ``(updated, ARState)``.
    """
    f = np.asarray(forecasts, float)
    rep = np.asarray(reported, float)
    if f.shape != rep.shape:
        raise ContractError(f"forecast and reported lengths differ: {f.shape} vs {rep.shape}")
    n = f.size
    err = rep - f
    updated = f.copy()
    rho = np.zeros(n)
    bb = np.zeros(n)
    npairs = np.zeros(n, int)
    fallback = np.zeros(n, bool)
    # Welford accumulators: pairs (x = e_{s-h}, y = e_s) and all errors
    k = 0
    mx = my = sxx = sxy = 0.0
    ne, me = 0, 0.0
    for t in range(n):
        et = err[t]
        if np.isfinite(et):
            ne += 1
            me += (et - me) / ne
            if t - h >= 0 and np.isfinite(err[t - h]):
                x = err[t - h]
                k += 1
                dx = x - mx
                mx += dx / k
                my += (et - my) / k
                sxx += dx * (x - mx)
                sxy += dx * (et - my)
        tau = t + h
        if tau >= n:
            continue
        # lag-error variance below 1e-8 of the mean square counts as zero
        if k >= 2 and sxx > VAR_RTOL * (sxx + k * mx * mx):
            r = sxy / sxx
            b = my - r * mx
        else:
            r, b = 0.0, (me if ne else 0.0)
            fallback[tau] = True
        rho[tau], bb[tau], npairs[tau] = r, b, k
        if np.isfinite(f[tau]):
            updated[tau] = f[tau] + (r * et if np.isfinite(et) else 0.0) + b
    return updated, ARState(rho, bb, npairs, fallback)


# --- stage 1 ------------------------------------------------------------------


@dataclass
class Stage1State:
    rho: float = 0.0
    b: float = 0.0
    w_action: float = 0.0
    e_action: float = 0.0
    delta_threshold: float = np.inf
    c: float = 0.0
    n_train: int = 0
    enabled: bool = False
    warning: str = ""


def stage_delta(stage_fc) -> np.ndarray:
    """Forecast stage change over the previous hour of the same forecast series."""
    s = np.asarray(stage_fc, float)
    out = np.full(s.shape, np.nan)
    out[1:] = s[1:] - s[:-1]
    return out


def stage1_filter(stage_fc, delta, state: Stage1State) -> np.ndarray:
    stage_fc = np.asarray(stage_fc, float)
    delta = np.asarray(delta, float)
    with np.errstate(invalid="ignore"):
        return (stage_fc >= state.w_action) & (delta >= state.delta_threshold)


def stage1_fit(measured, updated, stage_fc, delta, reported, w_action, reference="measured") -> Stage1State:
    """Fit the hysteresis line on measured points; arrays hold measured points only."""
    measured, updated, stage_fc, delta, reported = (
        np.asarray(a, float) for a in (measured, updated, stage_fc, delta, reported)
    )
    if measured.size == 0:
        return Stage1State(w_action=w_action, warning="no measured points")
    r1 = (updated - measured) / updated
    e_action = 100.0 * np.count_nonzero(stage_fc >= w_action) / measured.size
    threshold = float(np.percentile(delta, 100.0 - e_action))
    state = Stage1State(w_action=w_action, e_action=e_action, delta_threshold=threshold)
    keep = stage1_filter(stage_fc, delta, state)
    state.n_train = int(keep.sum())
    if state.n_train < 2 or np.ptp(delta[keep]) == 0:
        state.warning = f"stage 1 disabled: {state.n_train} filtered points"
        log.warning(state.warning)
        return state
    A = np.column_stack([delta[keep], np.ones(state.n_train)])
    (state.rho, state.b), *_ = np.linalg.lstsq(A, r1[keep], rcond=None)
    state.rho, state.b = float(state.rho), float(state.b)
    state.c = confidence_index(_forecast_mape(updated, reported, measured, reference), _mape(measured, reported))
    state.enabled = True
    return state


def _apply_factor(x, factor, clamp_min):
    clamped = factor < clamp_min
    return np.where(clamped, clamp_min, factor) * x, clamped


def stage1_predict(stage_fc, delta, state: Stage1State) -> np.ndarray:
    """Estimated percentage error; zero outside the training filter."""
    if not state.enabled:
        return np.zeros(np.shape(stage_fc))
    passed = stage1_filter(stage_fc, delta, state)
    return np.where(passed, state.rho * np.nan_to_num(delta) + state.b, 0.0)


def stage1_apply(updated, stage_fc, delta, state: Stage1State, clamp_min=0.01):
    """``(1 - c1 * r1_hat) * updated``; returns ``(x1, clamped)``."""
    updated = np.asarray(updated, float)
    if not state.enabled or state.c == 0:
        return updated.copy(), np.zeros(updated.shape, bool)
    return _apply_factor(updated, 1.0 - state.c * stage1_predict(stage_fc, delta, state), clamp_min)


# --- stage 2 ------------------------------------------------------------------


@dataclass
class Stage2State:
    curve: LowessCurve | None = None
    frac: float = 0.5
    c: float = 0.0
    enabled: bool = False


def stage2_fit(r2, stage_fc, x1, measured, reported, frac=0.5, iterations=0, reference="measured") -> Stage2State:
    r2, stage_fc, x1, measured, reported = (np.asarray(a, float) for a in (r2, stage_fc, x1, measured, reported))
    if r2.size < 3:
        return Stage2State(frac=frac)
    curve = LowessCurve.fit(stage_fc, r2, frac, iterations)
    c = confidence_index(_forecast_mape(x1, reported, measured, reference), _mape(measured, reported))
    return Stage2State(curve, frac, c, True)


def stage2_apply(x1, stage_fc, state: Stage2State, clamp_min=0.01):
    x1 = np.asarray(x1, float)
    if not state.enabled or state.c == 0:
        return x1.copy(), np.zeros(x1.shape, bool)
    r_hat = np.where(np.isfinite(stage_fc), state.curve(np.nan_to_num(stage_fc)), 0.0)
    return _apply_factor(x1, 1.0 - state.c * r_hat, clamp_min)


def stage2_fit_apply(r2, stage_fc_measured, x1_measured, measured, reported_measured, x1, stage_fc,
                     frac=0.5, iterations=0, clamp_min=0.01, reference="measured"):
    """Fit on measured points, then correct the full ``x1`` series."""
    state = stage2_fit(r2, stage_fc_measured, x1_measured, measured, reported_measured, frac, iterations, reference)
    x2, clamped = stage2_apply(x1, stage_fc, state, clamp_min)
    return x2, state, clamped


# --- stage 3 ------------------------------------------------------------------


@dataclass
class Stage3State:
    model: BootstrapEnsemble | None = None
    n_bootstrap: int = 20
    enabled: bool = False


def stage3_fit(features, r3, config: ResidualConfig) -> Stage3State:
    """``r3 = x2 - measured`` (absolute), so subtracting its estimate moves toward the measurement."""
    features = np.asarray(features, float)
    r3 = np.asarray(r3, float)
    if r3.size < 5:
        return Stage3State(n_bootstrap=config.n_bootstrap)
    q = config.target_clip_quantile
    if q > 0:
        lo, hi = np.quantile(r3, [q, 1.0 - q])
        r3 = np.clip(r3, lo, hi)
    model = BootstrapEnsemble(
        config.n_bootstrap, config.n_trees, config.learning_rate, config.max_depth, config.min_samples_leaf, config.seed
    ).fit(features, r3)
    return Stage3State(model, config.n_bootstrap, True)


def stage3_apply(x2, features, state: Stage3State):
    x2 = np.asarray(x2, float)
    if not state.enabled:
        return x2.copy()
    features = np.asarray(features, float)
    ok = np.isfinite(features).all(axis=1)
    pred = np.zeros(x2.shape)
    if ok.any():
        pred[ok] = state.model.predict(features[ok])
    return x2 - pred


def stage3_fit_apply(r3, features_measured, x2, features, config: ResidualConfig):
    state = stage3_fit(features_measured, r3, config)
    return stage3_apply(x2, features, state), state


# --- pipeline -----------------------------------------------------------------


@dataclass
class ResidualPipelineState:
    ar: ARState | None
    stage1: Stage1State
    stage2: Stage2State
    stage3: Stage3State
    n_fit_points: int = 0

    def summary(self) -> dict:
        return {
            "stage1": {k: v for k, v in asdict(self.stage1).items()},
            "stage2": {"enabled": self.stage2.enabled, "c": self.stage2.c, "frac": self.stage2.frac},
            "stage3": {"enabled": self.stage3.enabled, "n_bootstrap": self.stage3.n_bootstrap},
            "n_fit_points": self.n_fit_points,
        }


@dataclass
class PipelineResult:
    series: dict  # base, ar_corrected, stage1, stage2, stage3
    state: ResidualPipelineState
    filter_pass: np.ndarray
    clamped: np.ndarray
    delta: np.ndarray = field(default=None)

    @property
    def final(self):
        return self.series["stage3"]


def run_pipeline(base, reported, measured, stage_fc, fit_mask, h, config: ResidualConfig | None = None) -> PipelineResult:
    """AR correction then Stages 1-3, each fitted on measured points where ``fit_mask`` holds."""
    config = config or ResidualConfig()
    base, reported, measured, stage_fc = (np.asarray(a, float) for a in (base, reported, measured, stage_fc))
    fit_mask = np.asarray(fit_mask, bool)
    n = base.size
    if not all(a.shape == (n,) for a in (reported, measured, stage_fc, fit_mask)):
        raise ContractError("pipeline inputs must be aligned 1-D series of equal length")
    delta = stage_delta(stage_fc)

    if config.enable_ar:
        upd, ar_state = ar_correct(base, reported, h)
    else:
        upd, ar_state = base.copy(), None

    pts = fit_mask & np.isfinite(measured) & np.isfinite(upd) & np.isfinite(stage_fc) & np.isfinite(delta) & np.isfinite(reported)
    pts &= upd > 0
    state1 = Stage1State(w_action=config.w_action, warning="disabled by config")
    if config.enable_stage1:
        state1 = stage1_fit(measured[pts], upd[pts], stage_fc[pts], delta[pts], reported[pts], config.w_action,
                            config.confidence_reference)
    x1, clamp1 = stage1_apply(upd, stage_fc, delta, state1, config.clamp_min)

    state2 = Stage2State(frac=config.lowess_frac)
    clamp2 = np.zeros(n, bool)
    x2 = x1.copy()
    if config.enable_stage2:
        r1 = (upd[pts] - measured[pts]) / upd[pts]
        r2 = r1 - state1.c * stage1_predict(stage_fc[pts], delta[pts], state1)
        x2, state2, clamp2 = stage2_fit_apply(
            r2, stage_fc[pts], x1[pts], measured[pts], reported[pts], x1, stage_fc,
            config.lowess_frac, config.lowess_iterations, config.clamp_min, config.confidence_reference,
        )

    state3 = Stage3State(n_bootstrap=config.n_bootstrap)
    x3 = x2.copy()
    features = np.column_stack([stage_fc, delta])
    if config.enable_stage3:
        r3 = x2[pts] - measured[pts]
        x3, state3 = stage3_fit_apply(r3, features[pts], x2, features, config)

    series = {"base": base, "ar_corrected": upd, "stage1": x1, "stage2": x2, "stage3": x3}
    state = ResidualPipelineState(ar_state, state1, state2, state3, int(pts.sum()))
    filt = stage1_filter(stage_fc, delta, state1) if state1.enabled else np.zeros(n, bool)
    return PipelineResult(series, state, filt, clamp1 | clamp2, delta)


AUDIT_COLUMNS = ["timestamp", "base", "ar_corrected", "stage1", "stage2", "stage3", "reported", "measured", "flags"]


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def write_audit(path, times, result: PipelineResult, reported, measured, extrapolated=None) -> None:
    """Per-timestamp audit trail; ``flags`` is a ``|``-joined subset of filter, clamped, extrapolated."""
    extrapolated = np.zeros(len(times), bool) if extrapolated is None else np.asarray(extrapolated, bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        s = result.series
        for i, t in enumerate(times):
            flags = [name for name, on in (("filter", result.filter_pass[i]), ("clamped", result.clamped[i]),
                                           ("extrapolated", extrapolated[i])) if on]
            w.writerow([format_time(t)] + [_fmt(s[k][i]) for k in ("base", "ar_corrected", "stage1", "stage2", "stage3")]
                       + [_fmt(reported[i]), _fmt(measured[i]), "|".join(flags)])
