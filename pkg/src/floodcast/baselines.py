"""Reference forecasters of target-station discharge ``h`` hours ahead.

Every forecaster exposes ``fit(train, val)`` and ``predict(windows)`` on
:class:`~floodcast.ingest.WindowSet` objects and returns discharge (cfs).
``persistence`` needs no fitting. ``linear``, ``mlp`` and ``gbt`` see the
flattened window (all stages plus rainfall); ``plain_gru`` runs one GRU over
the per-hour vector of all inputs; ``dcrnn_direct`` is the graph model trained
on discharge instead of stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model
from . import numerics as nx
from .errors import ContractError
from .graph import WatershedGraph, build_transitions
from .ingest import WindowSet
from .trees import GradientBoostedTrees

log = logging.getLogger(__name__)

KINDS = ("persistence", "linear", "mlp", "gbt", "plain_gru", "dcrnn_direct")


def flatten_window(ws: WindowSet) -> np.ndarray:
    """``(M, T*N + T)`` feature matrix: stage block then rainfall."""
    return np.column_stack([ws.stage.reshape(len(ws), -1), ws.rain])


@dataclass
class Persistence:
    def fit(self, train=None, val=None):
        return self

    def predict(self, ws: WindowSet) -> np.ndarray:
        return np.asarray(ws.last_reported, float).copy()


@dataclass
class LinearBaseline:
    coef: np.ndarray | None = None

    def fit(self, train: WindowSet, val=None):
        X = np.column_stack([flatten_window(train), np.ones(len(train))])
        self.coef, *_ = np.linalg.lstsq(X, train.target_reported, rcond=None)
        return self

    def predict(self, ws: WindowSet) -> np.ndarray:
        return np.column_stack([flatten_window(ws), np.ones(len(ws))]) @ self.coef


@dataclass
class GBTBaseline:
    n_estimators: int = 50
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 2
    model: GradientBoostedTrees | None = None

    def fit(self, train: WindowSet, val=None):
        self.model = GradientBoostedTrees(self.n_estimators, self.learning_rate, self.max_depth, self.min_samples_leaf)
        self.model.fit(flatten_window(train), train.target_reported)
        return self

    def predict(self, ws: WindowSet) -> np.ndarray:
        return self.model.predict(flatten_window(ws))


# --- neural baselines share the base model's training loop ---------------------


def _mlp_init(n_nodes, target_index, hidden, K, T, layers, seed, horizon):
    rng = np.random.default_rng(seed)
    d_in = T * (n_nodes + 1)
    tensors = model.init_decoder_tensors(d_in, hidden, max(layers, 2), rng)
    return model.BaseModelParams(tensors, hidden, K, T, n_nodes, target_index, max(layers, 2), horizon=horizon)


def _mlp_forward(params, transitions, stage, rain):
    B = stage.shape[0]
    x = nx.Tensor(np.column_stack([stage.reshape(B, -1), rain]))
    return model.decode(x, params.tensors, params.decoder_layers)


def _gru_init(n_nodes, target_index, hidden, K, T, layers, seed, horizon):
    rng = np.random.default_rng(seed)
    tensors = model.init_gru_tensors("sq", n_nodes + 1, hidden, rng)
    tensors.update(model.init_decoder_tensors(hidden, hidden, layers, rng))
    return model.BaseModelParams(tensors, hidden, K, T, n_nodes, target_index, layers, horizon=horizon)


def _gru_forward(params, transitions, stage, rain):
    seq = np.concatenate([stage, rain[:, :, None]], axis=2)
    h = model.run_gru(seq, params.tensors, params.hidden_size, "sq")
    return model.decode(h, params.tensors, params.decoder_layers)


@dataclass
class NeuralBaseline:
    """Gradient-trained forecaster using the base model's loss, optimizer and early stopping."""

    kind: str
    graph: WatershedGraph
    grid: list = field(default_factory=lambda: [model.GridPoint()])
    seed: int = 0
    K: int = 2
    T: int = 24
    max_epochs: int = 50
    patience: int = 10
    result: model.TrainResult | None = None

    def _hooks(self):
        if self.kind == "mlp":
            return dict(init=_mlp_init, forward_fn=_mlp_forward)
        if self.kind == "plain_gru":
            return dict(init=_gru_init, forward_fn=_gru_forward)
        if self.kind == "dcrnn_direct":
            return {}
        raise ContractError(f"unknown neural baseline {self.kind!r}")

    def fit(self, train: WindowSet, val: WindowSet):
        self.result = model.train(
            train.dataset("discharge"), val.dataset("discharge"), self.graph, self.grid, self.seed,
            K=self.K, T=self.T, max_epochs=self.max_epochs, patience=self.patience, horizon=train.h,
            target="discharge", **self._hooks(),
        )
        return self

    def predict(self, ws: WindowSet) -> np.ndarray:
        params = self.result.params
        fwd = self._hooks().get("forward_fn", model.forward_batch)
        stage, rain = model.normalize_inputs(params, ws.stage, ws.rain)
        transitions = build_transitions(self.graph, self.K)
        out = np.concatenate([fwd(params, transitions, stage[i : i + 512], rain[i : i + 512]).data
                              for i in range(0, len(ws), 512)]) if len(ws) else np.empty(0)
        ns = params.norm_stats
        return out * ns.target_std + ns.target_mean


def make_baseline(kind: str, graph: WatershedGraph = None, **kwargs):
    if kind == "persistence":
        return Persistence()
    if kind == "linear":
        return LinearBaseline()
    if kind == "gbt":
        return GBTBaseline(**kwargs)
    if kind in ("mlp", "plain_gru", "dcrnn_direct"):
        if graph is None:
            raise ContractError(f"{kind} needs the watershed graph")
        return NeuralBaseline(kind, graph, **kwargs)
    raise ContractError(f"unknown baseline {kind!r}; expected one of {', '.join(KINDS)}")
