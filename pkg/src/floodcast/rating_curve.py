"""Time-segmented, piecewise power-law rating curves ``Q = a (h - h0)^b``.

Each segment is valid on ``[valid_from, valid_to)``; ``valid_to=None`` leaves the
segment open-ended. Within a segment the pieces tile the stage axis and must
join continuously.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BelowOffsetError, ContractError, DomainError, UncoveredPeriodError
from .timefmt import format_time, parse_time

CONTINUITY_RTOL = 1e-6


@dataclass(frozen=True)
class Piece:
    h_min: float
    h_max: float
    offset: float
    a: float
    b: float

    def flow(self, h):
        return self.a * (np.asarray(h, float) - self.offset) ** self.b

    def stage(self, q):
        return self.offset + (np.asarray(q, float) / self.a) ** (1.0 / self.b)


@dataclass
class Segment:
    valid_from: np.datetime64 | None
    valid_to: np.datetime64 | None
    pieces: list

    def __post_init__(self):
        if not self.pieces:
            raise ContractError("segment has no pieces")
        self.pieces = sorted(self.pieces, key=lambda p: p.h_min)
        for p in self.pieces:
            if not (p.a > 0 and p.b > 0):
                raise ContractError(f"piece needs a > 0 and b > 0, got a={p.a}, b={p.b}")
            if not p.offset < p.h_min < p.h_max:
                raise ContractError(f"piece needs offset < h_min < h_max, got {p}")
        for lo, hi in zip(self.pieces[:-1], self.pieces[1:]):
            if lo.h_max != hi.h_min:
                raise ContractError(f"pieces do not tile the stage axis at {lo.h_max} / {hi.h_min}")
            q_lo, q_hi = float(lo.flow(lo.h_max)), float(hi.flow(hi.h_min))
            if abs(q_lo - q_hi) > CONTINUITY_RTOL * max(abs(q_lo), abs(q_hi)):
                raise ContractError(f"discharge jumps at stage {lo.h_max}: {q_lo} vs {q_hi}")
        if self.valid_from is not None and self.valid_to is not None and not self.valid_from < self.valid_to:
            raise ContractError("segment validity interval is empty")
        self._breaks = np.array([p.h_min for p in self.pieces[1:]])
        self._qbreaks = np.array([float(p.flow(p.h_min)) for p in self.pieces[1:]])

    def covers(self, t) -> np.ndarray:
        t = np.asarray(t, dtype="datetime64[s]")
        ok = np.ones(t.shape, bool)
        if self.valid_from is not None:
            ok &= t >= self.valid_from
        if self.valid_to is not None:
            ok &= t < self.valid_to
        return ok

    def flow(self, h):
        """Discharge and an extrapolation flag (stage outside the tiled range)."""
        h = np.asarray(h, float)
        idx = np.searchsorted(self._breaks, h, side="right")
        offsets = np.array([p.offset for p in self.pieces])[idx]
        if np.any(h <= offsets):
            bad = h[h <= offsets].min() if h.ndim else h
            raise BelowOffsetError(f"stage {bad} is at or below the curve offset")
        a = np.array([p.a for p in self.pieces])[idx]
        b = np.array([p.b for p in self.pieces])[idx]
        q = a * (h - offsets) ** b
        extrapolated = (h >= self.pieces[-1].h_max) | (h < self.pieces[0].h_min)
        return q, extrapolated

    def stage(self, q):
        q = np.asarray(q, float)
        if np.any(~(q > 0)):
            raise DomainError("discharge must be positive to invert a rating curve")
        idx = np.searchsorted(self._qbreaks, q, side="right")
        offsets = np.array([p.offset for p in self.pieces])[idx]
        a = np.array([p.a for p in self.pieces])[idx]
        b = np.array([p.b for p in self.pieces])[idx]
        return offsets + (q / a) ** (1.0 / b)


@dataclass
class RatingCurveSet:
    station_id: str
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = sorted(
            self.segments, key=lambda s: s.valid_from if s.valid_from is not None else np.datetime64("0001-01-01")
        )
        for prev, nxt in zip(self.segments[:-1], self.segments[1:]):
            if prev.valid_to is None or nxt.valid_from is None or nxt.valid_from < prev.valid_to:
                raise ContractError(f"overlapping rating-curve segments for station {self.station_id}")

    def segment_index(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype="datetime64[s]"))
        idx = np.full(t.shape, -1)
        for i, seg in enumerate(self.segments):
            idx[seg.covers(t)] = i
        if np.any(idx < 0):
            raise UncoveredPeriodError(
                f"no rating curve for station {self.station_id} at {format_time(t[idx < 0][0])}"
            )
        return idx

    def _apply(self, values, t, fn):
        values = np.asarray(values, float)
        t = np.asarray(t, dtype="datetime64[s]")
        shape = np.broadcast_shapes(values.shape, t.shape)
        v = np.broadcast_to(values, shape).ravel()
        seg = self.segment_index(np.broadcast_to(t, shape).ravel())
        outs = None
        for i in np.unique(seg):
            m = seg == i
            res = fn(self.segments[i], v[m])
            res = res if isinstance(res, tuple) else (res,)
            if outs is None:
                outs = [np.empty(v.shape, dtype=r.dtype) for r in res]
            for o, r in zip(outs, res):
                o[m] = r
        return [o.reshape(shape) if shape else o[0].item() for o in outs]

    def flow(self, h, t):
        """Vectorized ``Q(h, t)`` and extrapolation flags."""
        q, flags = self._apply(h, t, lambda seg, v: seg.flow(v))
        return q, flags

    def flow_floored(self, h, t, margin=1e-3):
        """``flow`` for model output: stages below ``offset + margin`` are raised to it and flagged."""

        def fn(seg, v):
            floor = seg.pieces[0].offset + margin
            q, ext = seg.flow(np.maximum(v, floor))
            return q, ext | (v < floor)

        return self._apply(h, t, fn)

    def stage(self, q, t):
        return self._apply(q, t, lambda seg, v: seg.stage(v))[0]

    def to_dict(self) -> dict:
        return {
            "station_id": self.station_id,
            "segments": [
                {
                    "valid_from": None if s.valid_from is None else format_time(s.valid_from),
                    "valid_to": None if s.valid_to is None else format_time(s.valid_to),
                    "pieces": [
                        {"h_min": p.h_min, "h_max": p.h_max, "offset": p.offset, "a": p.a, "b": p.b}
                        for p in s.pieces
                    ],
                }
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "RatingCurveSet":
        segs = []
        for s in d["segments"]:
            segs.append(
                Segment(
                    None if s.get("valid_from") is None else parse_time(s["valid_from"]),
                    None if s.get("valid_to") is None else parse_time(s["valid_to"]),
                    [Piece(float(p["h_min"]), float(p["h_max"]), float(p["offset"]), float(p["a"]), float(p["b"])) for p in s["pieces"]],
                )
            )
        return cls(str(d["station_id"]), segs)


def to_flow(h, t, curves: RatingCurveSet) -> float:
    return curves.flow(h, t)[0]


def to_stage(q, t, curves: RatingCurveSet) -> float:
    return curves.stage(q, t)


def save_curves(path, curves) -> None:
    """Write one curve set, or ``{"curves": [...]}`` for several stations."""
    if isinstance(curves, RatingCurveSet):
        payload = curves.to_dict()
    else:
        payload = {"curves": [c.to_dict() for c in curves]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_curves(path) -> dict:
    """Map of station id -> :class:`RatingCurveSet`."""
    payload = json.loads(Path(path).read_text())
    items = payload["curves"] if "curves" in payload else [payload]
    sets = [RatingCurveSet.from_dict(d) for d in items]
    return {s.station_id: s for s in sets}


def two_piece_curve(offset, a, b, h_break, b_upper, h_min, h_max) -> list:
    """Continuous two-piece curve; the upper piece shares the offset and changes exponent."""
    lower = Piece(h_min, h_break, offset, a, b)
    q_break = float(lower.flow(h_break))
    a_upper = q_break / (h_break - offset) ** b_upper
    return [lower, Piece(h_break, h_max, offset, a_upper, b_upper)]
