"""Forecast skill metrics and flood-event peak metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError

MERGE_GAP_HOURS = 6


def _pair(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise ContractError(f"length mismatch: {y.size} observations vs {yhat.size} forecasts")
    return y, yhat


def mae(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mape(y, yhat):
    """Percent error over nonzero targets; returns ``(value, n_excluded)``."""
    y, yhat = _pair(y, yhat)
    keep = y != 0
    if not keep.any():
        return None, int(y.size)
    return float(100.0 * np.mean(np.abs((y[keep] - yhat[keep]) / y[keep]))), int((~keep).sum())


def rmse(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def bias(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean(yhat - y))


def nse(y, yhat):
    """Nash-Sutcliffe efficiency; None when the observations are constant."""
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        return None
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        return None
    return float(1.0 - np.sum((y - yhat) ** 2) / denom)


def cc(y, yhat):
    y, yhat = _pair(y, yhat)
    if y.size < 2:
        return None
    dy, df = y - y.mean(), yhat - yhat.mean()
    denom = math.sqrt(float(np.sum(df * df) * np.sum(dy * dy)))
    if denom == 0:
        return None
    return float(np.clip(np.sum(df * dy) / denom, -1.0, 1.0))


@dataclass
class PeakMetrics:
    start: int
    stop: int
    peak_bias: float
    peak_pct_bias: float | None
    peak_time_bias: float


@dataclass
class MetricsReport:
    n_points: int
    mae: float | None = None
    mape: float | None = None
    mape_excluded: int = 0
    rmse: float | None = None
    bias: float | None = None
    nse: float | None = None
    cc: float | None = None
    n_flood_events: int = 0
    events: list = field(default_factory=list)
    peak_bias: float | None = None
    peak_pct_bias: float | None = None
    peak_time_bias: float | None = None

    def to_dict(self):
        return asdict(self)


def compute_scalar_metrics(y, yhat) -> MetricsReport:
    y, yhat = _pair(y, yhat)
    if y.size == 0:
        return MetricsReport(0)
    m, excluded = mape(y, yhat)
    return MetricsReport(
        n_points=int(y.size),
        mae=mae(y, yhat),
        mape=m,
        mape_excluded=excluded,
        rmse=rmse(y, yhat),
        bias=bias(y, yhat),
        nse=nse(y, yhat),
        cc=cc(y, yhat),
    )


def extract_flood_events(stage, action_level, merge_gap=MERGE_GAP_HOURS):
    """Half-open index ranges ``(start, stop)`` where stage exceeds ``action_level``.

    Runs separated by fewer than ``merge_gap`` hours below the threshold are merged.
    """
    above = np.asarray(stage, dtype=float) > action_level
    edges = np.diff(np.concatenate([[0], above.astype(int), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    events = []
    for s, e in zip(starts, stops):
        if events and s - events[-1][1] < merge_gap:
            events[-1] = (events[-1][0], int(e))
        else:
            events.append((int(s), int(e)))
    return events


def peak_metrics(y, yhat, events) -> list:
    """Per-event bias, percent bias (relative to observed flow) and peak timing error in hours."""
    y, yhat = _pair(y, yhat)
    if not events:
        raise ContractError("peak metrics need at least one event")
    out = []
    for s, e in events:
        ys, fs = y[s:e], yhat[s:e]
        ok = ~(np.isnan(ys) | np.isnan(fs))
        if not ok.any():
            continue
        ys, fs = ys[ok], fs[ok]
        pos = np.flatnonzero(ok)
        pb = float(np.mean(fs - ys))
        total = float(np.sum(ys))
        pct = 100.0 * float(np.sum(fs - ys)) / total if total != 0 else None
        # np.argmax returns the earliest maximum
        ptb = float(pos[int(np.argmax(fs))] - pos[int(np.argmax(ys))])
        out.append(PeakMetrics(int(s), int(e), pb, pct, ptb))
    return out


def evaluate(y, yhat, stage=None, action_level=None) -> MetricsReport:
    """Scalar metrics on finite pairs plus peak metrics when flood events exist."""
    y, yhat = _pair(y, yhat)
    ok = np.isfinite(y) & np.isfinite(yhat)
    report = compute_scalar_metrics(y[ok], yhat[ok])
    if stage is not None and action_level is not None:
        events = extract_flood_events(stage, action_level)
        peaks = peak_metrics(y, yhat, events) if events else []
        report.n_flood_events = len(peaks)
        report.events = [asdict(p) for p in peaks]
        if peaks:
            report.peak_bias = float(np.mean([p.peak_bias for p in peaks]))
            pcts = [p.peak_pct_bias for p in peaks if p.peak_pct_bias is not None]
            report.peak_pct_bias = float(np.mean(pcts)) if pcts else None
            report.peak_time_bias = float(np.mean([p.peak_time_bias for p in peaks]))
    return report
