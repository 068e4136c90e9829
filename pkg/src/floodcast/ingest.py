"""Hourly multi-station frames: CSV I/O, resampling, splitting and windowing.

Long-format CSV, one observation per row::

    timestamp,station_id,variable,value
    2020-01-01T00:00:00Z,S0,stage_ft,3.41

Watershed rainfall rows use the pseudo station id ``watershed``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, InsufficientDataError, ParseError
from .model import Dataset, ForecastWindow
from .timefmt import HOUR, floor_hour, format_time, parse_time

HEADER = ["timestamp", "station_id", "variable", "value"]
VARIABLES = ("stage_ft", "rainfall_mm", "discharge_reported_cfs", "discharge_measured_cfs")
RAINFALL_ID = "watershed"
MATCH_TOLERANCE = np.timedelta64(30 * 60, "s")


@dataclass
class HourlyFrame:
    timestamps: np.ndarray  # datetime64[s], hourly, strictly increasing
    station_ids: list
    target_index: int
    stage: np.ndarray  # (n, N) feet, NaN = missing
    rainfall: np.ndarray  # (n,) mm
    reported: np.ndarray  # (n, N) cfs
    measured_times: np.ndarray = field(default_factory=lambda: np.array([], dtype="datetime64[s]"))
    measured_station: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    measured_values: np.ndarray = field(default_factory=lambda: np.array([], dtype=float))

    def __post_init__(self):
        n = len(self.timestamps)
        if n > 1 and np.any(np.diff(self.timestamps) != HOUR):
            raise ContractError("timestamps must be a gapless hourly grid")
        if self.stage.shape != (n, len(self.station_ids)) or self.reported.shape != self.stage.shape:
            raise ContractError("dense columns do not share the timestamp grid")
        order = np.lexsort((self.measured_station, self.measured_times))
        self.measured_times = self.measured_times[order]
        self.measured_station = self.measured_station[order]
        self.measured_values = self.measured_values[order]

    def __len__(self):
        return len(self.timestamps)

    @property
    def n_stations(self):
        return len(self.station_ids)

    @property
    def target_id(self):
        return self.station_ids[self.target_index]

    @property
    def missing_mask(self) -> np.ndarray:
        """True where any dense input (stages, rainfall, target reported flow) is missing."""
        return (
            np.isnan(self.stage).any(axis=1)
            | np.isnan(self.rainfall)
            | np.isnan(self.reported[:, self.target_index])
        )

    def measured_at(self, times, station=None) -> np.ndarray:
        """Measured discharge within +-30 min of each time (nearest), NaN otherwise."""
        station = self.target_index if station is None else station
        sel = self.measured_station == station
        mt, mv = self.measured_times[sel], self.measured_values[sel]
        times = np.asarray(times, dtype="datetime64[s]")
        out = np.full(times.shape, np.nan)
        if mt.size == 0:
            return out
        pos = np.searchsorted(mt, times)
        best = np.full(times.shape, np.timedelta64(10**9, "s"))
        for cand in (pos - 1, pos):
            ok = (cand >= 0) & (cand < mt.size)
            c = np.clip(cand, 0, mt.size - 1)
            dt = np.abs(mt[c] - times)
            take = ok & (dt <= MATCH_TOLERANCE) & (dt < best)
            out[take] = mv[c][take]
            best = np.where(take, dt, best)
        return out

    def slice(self, start, stop) -> "HourlyFrame":
        ts = self.timestamps[start:stop]
        if len(ts):
            lo, hi = ts[0] - MATCH_TOLERANCE, ts[-1] + MATCH_TOLERANCE
            keep = (self.measured_times >= lo) & (self.measured_times < hi)
        else:
            keep = np.zeros(self.measured_times.shape, bool)
        return HourlyFrame(
            ts,
            list(self.station_ids),
            self.target_index,
            self.stage[start:stop],
            self.rainfall[start:stop],
            self.reported[start:stop],
            self.measured_times[keep],
            self.measured_station[keep],
            self.measured_values[keep],
        )

    def equals(self, other: "HourlyFrame") -> bool:
        def same(a, b):
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=a.dtype.kind == "f")

        return (
            self.station_ids == other.station_ids
            and self.target_index == other.target_index
            and same(self.timestamps, other.timestamps)
            and same(self.stage, other.stage)
            and same(self.rainfall, other.rainfall)
            and same(self.reported, other.reported)
            and same(self.measured_times, other.measured_times)
            and same(self.measured_station, other.measured_station)
            and same(self.measured_values, other.measured_values)
        )

    def write_csv(self, path) -> None:
        """Long-format CSV; missing values are omitted, floats written with ``repr``."""
        rows = []
        for i, t in enumerate(self.timestamps):
            ts = format_time(t)
            for j, sid in enumerate(self.station_ids):
                if not np.isnan(self.stage[i, j]):
                    rows.append((t, ts, sid, "stage_ft", self.stage[i, j]))
                if not np.isnan(self.reported[i, j]):
                    rows.append((t, ts, sid, "discharge_reported_cfs", self.reported[i, j]))
            if not np.isnan(self.rainfall[i]):
                rows.append((t, ts, RAINFALL_ID, "rainfall_mm", self.rainfall[i]))
        for t, j, v in zip(self.measured_times, self.measured_station, self.measured_values):
            rows.append((t, format_time(t), self.station_ids[j], "discharge_measured_cfs", v))
        rows.sort(key=lambda r: r[0])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(HEADER) + "\n")
            for _, ts, sid, var, v in rows:
                fh.write(f"{ts},{sid},{var},{float(v)!r}\n")


def read_observations(path, known_stations):
    """Parse one long-format CSV into ``{(station, variable): (times, values)}``."""
    known = set(known_stations) | {RAINFALL_ID}
    buckets = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise ParseError(path, 1, f"expected header {','.join(HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, line, f"expected 4 fields, got {len(row)}")
            ts, sid, var, val = row
            if var not in VARIABLES:
                raise ParseError(path, line, f"unknown variable {var!r}")
            try:
                t = parse_time(ts)
                v = float(val)
            except ValueError as exc:
                raise ParseError(path, line, str(exc)) from None
            if sid not in known:
                raise ConfigError(f"{path}:{line}: unknown station {sid!r}")
            buckets.setdefault((sid, var), ([], []))
            buckets[(sid, var)][0].append(t)
            buckets[(sid, var)][1].append(v)
    return {k: (np.array(ts, dtype="datetime64[s]"), np.array(vs, float)) for k, (ts, vs) in buckets.items()}


def _nearest_on_grid(grid, times, values):
    """Value at each grid hour: exact top-of-hour sample, else nearest within 30 min."""
    out = np.full(grid.shape, np.nan)
    if times.size == 0:
        return out
    order = np.argsort(times, kind="stable")
    times, values = times[order], values[order]
    pos = np.searchsorted(times, grid)
    best = np.full(grid.shape, np.timedelta64(10**9, "s"))
    for cand in (pos - 1, pos):  # earlier candidate first wins ties
        ok = (cand >= 0) & (cand < times.size)
        c = np.clip(cand, 0, times.size - 1)
        dt = np.abs(times[c] - grid)
        take = ok & (dt <= MATCH_TOLERANCE) & (dt < best)
        out[take] = values[c][take]
        best = np.where(take, dt, best)
    return out


def _hourly_sum(grid, times, values):
    out = np.full(grid.shape, np.nan)
    if times.size == 0:
        return out
    idx = ((floor_hour(times) - grid[0]) // HOUR).astype(int)
    ok = (idx >= 0) & (idx < grid.size)
    sums = np.bincount(idx[ok], weights=values[ok], minlength=grid.size)
    seen = np.bincount(idx[ok], minlength=grid.size) > 0
    out[seen] = sums[seen]
    return out


def load_and_resample(paths, stations, target=None) -> HourlyFrame:
    """Load long-format CSVs and align them on an hourly grid."""
    stations = [str(s) for s in stations]
    if not stations:
        raise ConfigError("station list is empty")
    target = stations[0] if target is None else str(target)
    if target not in stations:
        raise ConfigError(f"target {target!r} is not in the station list")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    merged = {}
    for path in paths:
        for key, (ts, vs) in read_observations(path, stations).items():
            if key in merged:
                merged[key] = (np.concatenate([merged[key][0], ts]), np.concatenate([merged[key][1], vs]))
            else:
                merged[key] = (ts, vs)
    dense = [ts for (sid, var), (ts, _) in merged.items() if var != "discharge_measured_cfs"]
    if not dense or not any(len(t) for t in dense):
        raise InsufficientDataError("no dense observations found")
    start = floor_hour(min(t.min() for t in dense if len(t)))
    stop = floor_hour(max(t.max() for t in dense if len(t)))
    grid = np.arange(start, stop + HOUR, HOUR)
    empty = (np.array([], dtype="datetime64[s]"), np.array([]))
    stage = np.column_stack([_nearest_on_grid(grid, *merged.get((s, "stage_ft"), empty)) for s in stations])
    reported = np.column_stack(
        [_nearest_on_grid(grid, *merged.get((s, "discharge_reported_cfs"), empty)) for s in stations]
    )
    rain_keys = [k for k in merged if k[1] == "rainfall_mm"]
    if rain_keys:
        rain = np.nanmean(np.vstack([_hourly_sum(grid, *merged[k]) for k in sorted(rain_keys)]), axis=0) if len(
            rain_keys
        ) > 1 else _hourly_sum(grid, *merged[rain_keys[0]])
    else:
        rain = np.full(grid.shape, np.nan)
    mt, ms, mv = [], [], []
    for j, s in enumerate(stations):
        ts, vs = merged.get((s, "discharge_measured_cfs"), empty)
        mt.append(ts)
        mv.append(vs)
        ms.append(np.full(ts.shape, j))
    return HourlyFrame(
        grid,
        stations,
        stations.index(target),
        stage,
        rain,
        reported,
        np.concatenate(mt).astype("datetime64[s]"),
        np.concatenate(ms).astype(int),
        np.concatenate(mv),
    )


def split_bounds(n, fractions=(60, 15, 25)):
    """Row boundaries ``(b_train, b_val)`` for a chronological split of ``n`` hours."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 100) > 1e-9:
        raise ContractError(f"split fractions must be three non-negative percents summing to 100, got {fractions}")
    b1 = int(round(n * fractions[0] / 100))
    b2 = int(round(n * (fractions[0] + fractions[1]) / 100))
    return b1, b2


def split(frame: HourlyFrame, fractions=(60, 15, 25), T=24):
    """Chronological train/val/test frames."""
    n = len(frame)
    if n < 3 * T:
        raise InsufficientDataError(f"frame has {n} hours; need at least {3 * T}")
    b1, b2 = split_bounds(n, fractions)
    return frame.slice(0, b1), frame.slice(b1, b2), frame.slice(b2, n)


@dataclass
class WindowSet:
    """Sliding windows as stacked arrays; row ``i`` ends at ``origin[i]`` and targets ``origin[i] + h``."""

    h: int
    T: int
    origin: np.ndarray
    target_time: np.ndarray
    stage: np.ndarray  # (M, T, N)
    rain: np.ndarray  # (M, T)
    target_stage: np.ndarray
    target_reported: np.ndarray
    target_measured: np.ndarray  # NaN when no field measurement
    last_reported: np.ndarray
    last_stage: np.ndarray
    target_index: int = 0

    def __len__(self):
        return len(self.origin)

    def __getitem__(self, i):
        window = ForecastWindow(self.stage[i], self.rain[i], self.target_time[i] - self.h * HOUR, self.h)
        return window, self.target_stage[i], self.target_reported[i], self.target_measured[i]

    @property
    def target_index_rows(self):
        return self.origin + self.h

    def subset(self, mask) -> "WindowSet":
        fields = ("origin", "target_time", "stage", "rain", "target_stage", "target_reported",
                  "target_measured", "last_reported", "last_stage")
        return WindowSet(self.h, self.T, **{f: getattr(self, f)[mask] for f in fields}, target_index=self.target_index)

    def dataset(self, target="stage") -> Dataset:
        y = self.target_stage if target == "stage" else self.target_reported
        return Dataset(self.stage, self.rain, y)


def make_windows(frame: HourlyFrame, T=24, h=1) -> WindowSet:
    if T < 1 or h < 1:
        raise ContractError("T and h must be positive")
    n = len(frame)
    ti = frame.target_index
    bad = frame.missing_mask.astype(int)
    csum = np.concatenate([[0], np.cumsum(bad)])
    origins = np.arange(T - 1, n - h)
    if origins.size:
        clean = csum[origins + 1] - csum[origins + 1 - T] == 0
        tgt = origins + h
        clean &= ~np.isnan(frame.stage[tgt, ti]) & ~np.isnan(frame.reported[tgt, ti])
        origins = origins[clean]
    idx = origins[:, None] + np.arange(-T + 1, 1)[None, :]
    tgt = origins + h
    return WindowSet(
        h,
        T,
        origins,
        frame.timestamps[tgt],
        frame.stage[idx] if origins.size else np.empty((0, T, frame.n_stations)),
        frame.rainfall[idx] if origins.size else np.empty((0, T)),
        frame.stage[tgt, ti],
        frame.reported[tgt, ti],
        frame.measured_at(frame.timestamps[tgt]),
        frame.reported[origins, ti],
        frame.stage[origins, ti],
        target_index=ti,
    )


def split_windows(windows: WindowSet, n_hours, fractions=(60, 15, 25)):
    """Assign each window to the split containing its target hour."""
    b1, b2 = split_bounds(n_hours, fractions)
    rows = windows.target_index_rows
    return windows.subset(rows < b1), windows.subset((rows >= b1) & (rows < b2)), windows.subset(rows >= b2)
