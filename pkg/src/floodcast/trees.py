"""Squared-error regression trees and gradient boosting, plus a bootstrap bag of ensembles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RegressionTree:
    max_depth: int = 3
    min_samples_leaf: int = 2
    # flat node arrays; feature == -1 marks a leaf
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def fit(self, X, y) -> "RegressionTree":
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self._grow(X, y, np.arange(len(y)), 0)
        return self

    def _new_node(self, value):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    def _grow(self, X, y, rows, depth):
        node = self._new_node(y[rows].mean())
        if depth >= self.max_depth or len(rows) < 2 * self.min_samples_leaf:
            return node
        split = best_split(X[rows], y[rows], self.min_samples_leaf)
        if split is None:
            return node
        j, thr = split
        mask = X[rows, j] <= thr
        self.feature[node] = j
        self.threshold[node] = thr
        self.left[node] = self._grow(X, y, rows[mask], depth + 1)
        self.right[node] = self._grow(X, y, rows[~mask], depth + 1)
        return node

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        node = np.zeros(len(X), int)
        feature = np.array(self.feature)
        threshold = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        active = feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, feature[n]] <= threshold[n]
            node[idx] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return np.array(self.value)[node]


def best_split(X, y, min_leaf):
    """Feature and threshold with the largest squared-error reduction, or None."""
    n, d = X.shape
    best_gain, best = 1e-12 * max(float(np.var(y)) * n, 1e-300), None
    total, total_sq = y.sum(), np.dot(y, y)
    base = total_sq - total * total / n
    for j in range(d):
        order = np.argsort(X[:, j], kind="mergesort")
        xs, ys = X[order, j], y[order]
        csum = np.cumsum(ys)[:-1]
        nl = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        nr = n - nl
        sse = total_sq - csum**2 / nl - (total - csum) ** 2 / nr
        gain = np.where(valid, base - sse, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = gain[i]
            thr = 0.5 * (xs[i] + xs[i + 1])
            # adjacent floats can round the midpoint up onto the right-hand value
            best = (j, thr if thr < xs[i + 1] else xs[i])
    return best


@dataclass
class GradientBoostedTrees:
    n_estimators: int = 50
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 2
    init_: float = 0.0
    trees: list = field(default_factory=list)

    def fit(self, X, y) -> "GradientBoostedTrees":
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        self.init_ = float(y.mean())
        pred = np.full(len(y), self.init_)
        self.trees = []
        for _ in range(self.n_estimators):
            tree = RegressionTree(self.max_depth, self.min_samples_leaf).fit(X, y - pred)
            pred += self.learning_rate * tree.predict(X)
            self.trees.append(tree)
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        out = np.full(len(X), self.init_)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out


@dataclass
class BootstrapEnsemble:
    """Mean of boosted ensembles fitted on bootstrap resamples."""

    n_bootstrap: int = 20
    n_estimators: int = 50
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 2
    seed: int = 0
    members: list = field(default_factory=list)

    def fit(self, X, y) -> "BootstrapEnsemble":
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        self.members = []
        for b in range(self.n_bootstrap):
            rng = np.random.default_rng([self.seed, b])
            idx = rng.integers(0, len(y), size=len(y))
            gbt = GradientBoostedTrees(self.n_estimators, self.learning_rate, self.max_depth, self.min_samples_leaf)
            self.members.append(gbt.fit(X[idx], y[idx]))
        return self

    def predict(self, X) -> np.ndarray:
        return np.mean([m.predict(X) for m in self.members], axis=0)
