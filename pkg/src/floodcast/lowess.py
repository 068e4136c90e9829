"""Locally weighted linear smoothing (tricube kernel, nearest-neighbour span)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def lowess(x, y, frac=0.5, iterations=0):
    """Smoothed values at sorted ``x``; returns ``(x_sorted, y_fitted)``.

    Each point uses its ``int(frac * n)`` nearest neighbours, weighted by the
    tricube of distance over the farthest neighbour's distance. ``iterations``
    adds bisquare robustness passes.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    order = np.argsort(x, kind="mergesort")
    x, y = x[order], y[order]
    n = x.size
    k = min(n, max(2, int(frac * n + 1e-10)))
    robust = np.ones(n)
    fitted = np.empty(n)
    for _ in range(iterations + 1):
        left = 0
        for i in range(n):
            # slide the k-point window [left, left + k) towards x[i]
            while left + k < n and x[i] - x[left] > x[left + k] - x[i]:
                left += 1
            xs, ys = x[left : left + k], y[left : left + k]
            radius = max(x[i] - x[left], x[left + k - 1] - x[i])
            if radius > 0:
                d = np.clip(np.abs(xs - x[i]) / radius, 0.0, 1.0)
                w = (1.0 - d**3) ** 3
            else:
                w = np.ones(k)
            w = w * robust[left : left + k]
            sw = w.sum()
            # a line needs two supporting points; otherwise keep the observation
            if np.count_nonzero(w > 1e-12) < 2:
                fitted[i] = y[i]
                continue
            xm = np.dot(w, xs) / sw
            ym = np.dot(w, ys) / sw
            sxx = np.dot(w, (xs - xm) ** 2)
            if sxx > 1e-12 * max(radius * radius, 1e-300) * sw:
                slope = np.dot(w, (xs - xm) * (ys - ym)) / sxx
                fitted[i] = ym + slope * (x[i] - xm)
            else:
                fitted[i] = ym
        if iterations:
            resid = y - fitted
            s = np.median(np.abs(resid))
            if s == 0:
                break
            u = np.clip(resid / (6.0 * s), -1.0, 1.0)
            robust = (1.0 - u**2) ** 2
    return x, fitted


@dataclass
class LowessCurve:
    """Fitted smoother evaluated by linear interpolation, constant beyond the ends."""

    x: np.ndarray
    y: np.ndarray
    frac: float = 0.5

    @classmethod
    def fit(cls, x, y, frac=0.5, iterations=0) -> "LowessCurve":
        xs, fitted = lowess(x, y, frac, iterations)
        ux, inv = np.unique(xs, return_inverse=True)
        uy = np.bincount(inv, weights=fitted) / np.bincount(inv)
        return cls(ux, uy, frac)

    def __call__(self, x):
        return np.interp(np.asarray(x, float), self.x, self.y)
