"""Graph-convolutional GRU forecaster for target-station stage.

The water-level sequence of every station runs through a GRU whose gate maps
are diffusion convolutions over the watershed graph; watershed rainfall runs
through a plain GRU. The target node's final hidden state is concatenated with
the rainfall hidden state and decoded by a ReLU MLP into the stage ``h`` hours
ahead.

Tensors inside the recurrences are batched: node features are ``(B, N, D)``,
plain GRU features ``(B, D)``.
"""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .graph import TransitionSet, WatershedGraph, build_transitions

log = logging.getLogger(__name__)

HORIZONS = range(1, 7)


@dataclass
class NormStats:
    stage_mean: np.ndarray
    stage_std: np.ndarray
    rain_mean: float
    rain_std: float
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, stage, rain, targets) -> "NormStats":
        """Per-channel z-score statistics; ``stage`` is ``(..., N)``, rainfall enters as ``log1p``."""
        stage = np.asarray(stage, dtype=float)
        rain = np.log1p(np.asarray(rain, dtype=float))
        n = stage.shape[-1]
        flat = stage.reshape(-1, n)
        s_std = flat.std(axis=0)
        r_std = float(np.std(rain))
        t_std = float(np.std(targets))
        if np.any(s_std <= 0) or r_std <= 0 or t_std <= 0:
            raise ContractError("constant input channel; cannot normalize")
        return cls(flat.mean(axis=0), s_std, float(np.mean(rain)), r_std, float(np.mean(targets)), t_std)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["stage_mean"], float),
            np.asarray(d["stage_std"], float),
            float(d["rain_mean"]),
            float(d["rain_std"]),
            float(d["target_mean"]),
            float(d["target_std"]),
        )


@dataclass
class BaseModelParams:
    tensors: dict
    hidden_size: int
    K: int
    T: int
    n_nodes: int
    target_index: int
    decoder_layers: int
    norm_stats: NormStats | None = None
    horizon: int = 1
    target: str = "stage"

    def parameters(self):
        return [self.tensors[k] for k in sorted(self.tensors)]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "BaseModelParams":
        new = copy.copy(self)
        new.tensors = {k: nx.parameter(v.data.copy()) for k, v in self.tensors.items()}
        return new

    def meta(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "K": self.K,
            "T": self.T,
            "n_nodes": self.n_nodes,
            "target_index": self.target_index,
            "decoder_layers": self.decoder_layers,
            "horizon": self.horizon,
            "target": self.target,
            "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None,
        }

    def save(self, path, extra_meta=None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        nx.save_params(path, {k: v.data for k, v in self.tensors.items()}, meta)

    @classmethod
    def load(cls, path) -> "BaseModelParams":
        arrays, meta = nx.load_params(path)
        norm = NormStats.from_dict(meta["norm_stats"]) if meta.get("norm_stats") else None
        return cls(
            {k: nx.parameter(v) for k, v in arrays.items()},
            meta["hidden_size"],
            meta["K"],
            meta["T"],
            meta["n_nodes"],
            meta["target_index"],
            meta["decoder_layers"],
            norm,
            meta.get("horizon", 1),
            meta.get("target", "stage"),
        )


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_gru_tensors(prefix, d_in, hidden, rng) -> dict:
    out = {}
    for gate in "ruc":
        out[f"{prefix}_{gate}_weight"] = nx.parameter(_glorot(rng, (d_in + hidden, hidden), d_in + hidden, hidden))
        out[f"{prefix}_{gate}_bias"] = nx.parameter(np.full(hidden, 1.0 if gate == "u" else 0.0))
    return out


def init_decoder_tensors(d_in, hidden, layers, rng) -> dict:
    out = {}
    sizes = [d_in] + [hidden] * (layers - 1) + [1]
    for i in range(layers):
        out[f"dec{i}_weight"] = nx.parameter(_glorot(rng, (sizes[i], sizes[i + 1]), sizes[i], sizes[i + 1]))
        out[f"dec{i}_bias"] = nx.parameter(np.zeros(sizes[i + 1]))
    return out


def init_params(n_nodes, target_index, hidden_size=16, K=2, T=24, decoder_layers=1, seed=0, horizon=1) -> BaseModelParams:
    if decoder_layers < 1:
        raise ContractError("decoder needs at least one layer")
    rng = np.random.default_rng(seed)
    d_in = 1
    tensors = {}
    for gate in "ruc":
        fan_in = (d_in + hidden_size) * K
        tensors[f"gc_{gate}_theta"] = nx.parameter(
            _glorot(rng, (hidden_size, d_in + hidden_size, K), fan_in, hidden_size)
        )
        tensors[f"gc_{gate}_bias"] = nx.parameter(np.full(hidden_size, 1.0 if gate == "u" else 0.0))
    tensors.update(init_gru_tensors("rg", 1, hidden_size, rng))
    tensors.update(init_decoder_tensors(2 * hidden_size, hidden_size, decoder_layers, rng))
    return BaseModelParams(tensors, hidden_size, K, T, n_nodes, target_index, decoder_layers, horizon=horizon)


# --- diffusion convolution -------------------------------------------------


def _stacked_powers(transitions: TransitionSet) -> np.ndarray:
    K, N, _ = transitions.powers.shape
    return transitions.powers.reshape(K * N, N)


def _diffuse_flat(Xf, N, transitions: TransitionSet) -> nx.Tensor:
    """Diffuse node-major flat features ``(N*B, D)`` into ``(N*B, D*K)`` ordered (d_in, k)."""
    NB, D = Xf.shape
    B = NB // N
    K = transitions.K
    Z = nx.matmul(_stacked_powers(transitions), nx.reshape(Xf, (N, B * D)))  # (K*N, B*D)
    Z = nx.transpose(nx.reshape(Z, (K, N, B, D)), (1, 2, 3, 0))
    return nx.reshape(Z, (NB, D * K))


def diffuse(X, transitions: TransitionSet) -> nx.Tensor:
    """Stack ``P^k X`` for k < K into features ``(B, N, D_in * K)`` ordered (d_in, k)."""
    X = nx.as_tensor(X)
    B, N, D = X.shape
    if transitions.powers.shape[1] != N:
        raise DimensionError("diffuse", X.shape, transitions.powers.shape)
    Xf = nx.reshape(nx.transpose(X, (1, 0, 2)), (N * B, D))
    Z = _diffuse_flat(Xf, N, transitions)
    return nx.transpose(nx.reshape(Z, (N, B, D * transitions.K)), (1, 0, 2))


def theta_matrix(theta) -> nx.Tensor:
    """``(D_out, D_in, K)`` parameter tensor as a ``(D_in * K, D_out)`` matrix."""
    theta = nx.as_tensor(theta)
    d_out, d_in, K = theta.shape
    return nx.reshape(nx.transpose(theta, (1, 2, 0)), (d_in * K, d_out))


def dconv(X, theta, transitions: TransitionSet, activation=nx.relu) -> nx.Tensor:
    """Diffusion convolution layer; ``X`` is ``(N, D_in)`` or ``(B, N, D_in)``.

    ``activation=None`` returns the pre-activation (used by GRU gates).
    """
    X = nx.as_tensor(X)
    theta = nx.as_tensor(theta)
    squeeze = X.ndim == 2
    if squeeze:
        X = nx.reshape(X, (1,) + X.shape)
    if X.ndim != 3 or theta.ndim != 3 or theta.shape[1] != X.shape[2] or theta.shape[2] != transitions.K:
        raise DimensionError("dconv", X.shape, theta.shape)
    out = nx.matmul(diffuse(X, transitions), theta_matrix(theta))
    if activation is not None:
        out = activation(out)
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out


def _gate_maps(tensors, prefix="gc"):
    """Flattened gate matrices, reset and update fused into one map."""
    ru = nx.concat([theta_matrix(tensors[f"{prefix}_r_theta"]), theta_matrix(tensors[f"{prefix}_u_theta"])], axis=1)
    ru_b = nx.concat([tensors[f"{prefix}_r_bias"], tensors[f"{prefix}_u_bias"]], axis=0)
    return ru, ru_b, theta_matrix(tensors[f"{prefix}_c_theta"]), tensors[f"{prefix}_c_bias"]


def _gru_update(Xf, Hf, maps, mix):
    """Shared GRU arithmetic; ``mix`` maps concatenated inputs to gate features."""
    ru_w, ru_b, c_w, c_b = maps
    hidden = Hf.shape[1]
    ru = nx.sigmoid(nx.matmul(mix(nx.concat([Xf, Hf], axis=1)), ru_w) + ru_b)
    r = nx.take(ru, (slice(None), slice(0, hidden)))
    u = nx.take(ru, (slice(None), slice(hidden, 2 * hidden)))
    c = nx.tanh(nx.matmul(mix(nx.concat([Xf, r * Hf], axis=1)), c_w) + c_b)
    # u*H + (1-u)*c
    return c + u * (Hf - c)


def gcgru_step(X_t, H_prev, params, transitions: TransitionSet, prefix="gc") -> nx.Tensor:
    """One graph-convolutional GRU update; gate maps are diffusion convolutions.

    ``X_t`` is ``(N, D)`` or ``(B, N, D)``; ``H_prev`` matches with ``hidden`` columns.
    """
    p = params.tensors if isinstance(params, BaseModelParams) else params
    X_t, H_prev = nx.as_tensor(X_t), nx.as_tensor(H_prev)
    squeeze = X_t.ndim == 2
    if squeeze:
        X_t = nx.reshape(X_t, (1,) + X_t.shape)
        H_prev = nx.reshape(H_prev, (1,) + H_prev.shape)
    if X_t.ndim != 3 or X_t.shape[:2] != H_prev.shape[:2]:
        raise DimensionError("gcgru_step", X_t.shape, H_prev.shape)
    B, N, D = X_t.shape
    hidden = H_prev.shape[2]
    Xf = nx.reshape(nx.transpose(X_t, (1, 0, 2)), (N * B, D))
    Hf = nx.reshape(nx.transpose(H_prev, (1, 0, 2)), (N * B, hidden))
    Hf = _gru_update(Xf, Hf, _gate_maps(p, prefix), lambda Z: _diffuse_flat(Z, N, transitions))
    H = nx.transpose(nx.reshape(Hf, (N, B, hidden)), (1, 0, 2))
    if squeeze:
        H = nx.reshape(H, H.shape[1:])
    return H


def _plain_maps(tensors, prefix):
    ru = nx.concat([tensors[f"{prefix}_r_weight"], tensors[f"{prefix}_u_weight"]], axis=1)
    ru_b = nx.concat([tensors[f"{prefix}_r_bias"], tensors[f"{prefix}_u_bias"]], axis=0)
    return ru, ru_b, tensors[f"{prefix}_c_weight"], tensors[f"{prefix}_c_bias"]


def _identity(Z):
    return Z


def plain_gru_step(x_t, h_prev, tensors: dict, prefix="rg") -> nx.Tensor:
    """Standard GRU cell on ``(B, D)`` inputs, reset applied before the candidate map."""
    x_t, h_prev = nx.as_tensor(x_t), nx.as_tensor(h_prev)
    if x_t.ndim != 2 or x_t.shape[0] != h_prev.shape[0]:
        raise DimensionError("plain_gru_step", x_t.shape, h_prev.shape)
    return _gru_update(x_t, h_prev, _plain_maps(tensors, prefix), _identity)


def run_gru(seq, tensors, hidden, prefix="rg") -> nx.Tensor:
    """Final hidden state of a plain GRU over ``seq`` of shape ``(B, T, D)``."""
    seq = np.asarray(seq, dtype=float)
    maps = _plain_maps(tensors, prefix)
    h = nx.Tensor(np.zeros((seq.shape[0], hidden)))
    for t in range(seq.shape[1]):
        h = _gru_update(nx.Tensor(seq[:, t, :]), h, maps, _identity)
    return h


def run_gcgru(stage, tensors, hidden, transitions: TransitionSet, prefix="gc") -> nx.Tensor:
    """Final graph-GRU hidden state, node-major flat ``(N*B, hidden)``, for ``stage (B,T,N)``."""
    B, T, N = stage.shape
    maps = _gate_maps(tensors, prefix)
    nodes_first = np.ascontiguousarray(np.transpose(stage, (1, 2, 0)))  # (T, N, B)

    def mix(Z):
        return _diffuse_flat(Z, N, transitions)

    Hf = nx.Tensor(np.zeros((N * B, hidden)))
    for t in range(T):
        Hf = _gru_update(nx.Tensor(nodes_first[t].reshape(N * B, 1)), Hf, maps, mix)
    return Hf


def decode(emb, tensors, layers) -> nx.Tensor:
    z = emb
    for i in range(layers):
        z = nx.matmul(z, tensors[f"dec{i}_weight"]) + tensors[f"dec{i}_bias"]
        if i < layers - 1:
            z = nx.relu(z)
    return nx.reshape(z, (z.shape[0],))


def forward_batch(params: BaseModelParams, transitions: TransitionSet, stage, rain) -> nx.Tensor:
    """Normalized predictions ``(B,)`` from normalized ``stage (B,T,N)`` and ``rain (B,T)``."""
    stage = np.asarray(stage, dtype=float)
    rain = np.asarray(rain, dtype=float)
    B, T, N = stage.shape
    if N != params.n_nodes or rain.shape[:2] != (B, T):
        raise DimensionError("forward", stage.shape, rain.shape)
    p = params.tensors
    Hf = run_gcgru(stage, p, params.hidden_size, transitions)
    ti = params.target_index
    h_target = nx.take(Hf, (slice(ti * B, (ti + 1) * B), slice(None)))
    h_rain = run_gru(rain.reshape(B, T, 1), p, params.hidden_size, "rg")
    return decode(nx.concat([h_rain, h_target], axis=-1), p, params.decoder_layers)


def normalize_inputs(params: BaseModelParams, stage, rain):
    ns = params.norm_stats
    stage = (np.asarray(stage, float) - ns.stage_mean) / ns.stage_std
    rain = (np.log1p(np.asarray(rain, float)) - ns.rain_mean) / ns.rain_std
    return stage, rain


def predict(params: BaseModelParams, transitions: TransitionSet, stage, rain, batch_size=512) -> np.ndarray:
    """De-normalized predictions for raw ``stage (M,T,N)`` and ``rain (M,T)`` arrays."""
    stage, rain = normalize_inputs(params, stage, rain)
    out = np.empty(stage.shape[0])
    for i in range(0, stage.shape[0], batch_size):
        out[i : i + batch_size] = forward_batch(params, transitions, stage[i : i + batch_size], rain[i : i + batch_size]).data
    ns = params.norm_stats
    return out * ns.target_std + ns.target_mean


@dataclass
class ForecastWindow:
    stage_series: np.ndarray  # (T, N) feet
    rainfall_series: np.ndarray  # (T,) or (T, 1) mm
    t: object = None
    h: int = 1

    def __post_init__(self):
        if self.h not in HORIZONS:
            raise ContractError(f"horizon must be in 1..6, got {self.h}")
        self.stage_series = np.asarray(self.stage_series, float)
        self.rainfall_series = np.asarray(self.rainfall_series, float).reshape(-1)


def forward(window: ForecastWindow, params: BaseModelParams, graph: WatershedGraph, transitions=None) -> float:
    """Stage forecast (feet) for one window."""
    if window.h not in HORIZONS:
        raise ContractError(f"horizon must be in 1..6, got {window.h}")
    if transitions is None:
        transitions = build_transitions(graph, params.K)
    return float(predict(params, transitions, window.stage_series[None], window.rainfall_series[None])[0])


# --- loss -------------------------------------------------------------------


@dataclass
class BinWeights:
    """Inverse-density sample weights ``ln(1 + n_total / count(bin))``."""

    edges: np.ndarray
    counts: np.ndarray
    n_total: int

    @classmethod
    def fit(cls, targets, n_bins=50) -> "BinWeights":
        targets = np.asarray(targets, float)
        if targets.size == 0:
            raise ContractError("cannot fit bin weights on an empty target set")
        lo, hi = float(targets.min()), float(targets.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        counts = np.bincount(cls._bin(edges, targets), minlength=n_bins)
        return cls(edges, counts, targets.size)

    @staticmethod
    def _bin(edges, y):
        n_bins = len(edges) - 1
        idx = np.searchsorted(edges, y, side="right") - 1
        return np.clip(idx, 0, n_bins - 1)

    def __call__(self, y) -> np.ndarray:
        counts = self.counts[self._bin(self.edges, np.asarray(y, float))]
        # bins empty in training get the weight of a singleton bin
        return np.log1p(self.n_total / np.maximum(counts, 1))

    def scaled(self, mean, std) -> "BinWeights":
        """Same binning expressed on ``(y - mean) / std``."""
        return BinWeights((self.edges - mean) / std, self.counts, self.n_total)


def weighted_mse_loss(preds, targets, bin_weights: BinWeights) -> nx.Tensor:
    preds = nx.as_tensor(preds)
    targets = np.asarray(targets, float)
    if targets.size == 0:
        raise ContractError("empty batch")
    if preds.shape != targets.shape:
        raise DimensionError("weighted_mse_loss", preds.shape, targets.shape)
    diff = preds - targets
    return nx.weighted_mean(diff * diff, bin_weights(targets))


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    batch_size: int = 64
    lr: float = 1e-3
    hidden_size: int = 16
    decoder_layers: int = 1


DEFAULT_GRID = {
    "batch_size": [16, 64],
    "lr": [1e-3, 3e-4],
    "hidden_size": [16, 32],
    "decoder_layers": [1, 2],
}


def expand_grid(grid) -> list:
    """Cartesian product of a ``{name: [values]}`` mapping, or a list of points."""
    if isinstance(grid, dict):
        keys = sorted(grid)
        return [GridPoint(**dict(zip(keys, vals))) for vals in itertools.product(*(grid[k] for k in keys))]
    return [g if isinstance(g, GridPoint) else GridPoint(**g) for g in grid]


@dataclass
class Dataset:
    """Raw model inputs and targets; ``stage (M,T,N)``, ``rain (M,T)``, ``y (M,)``."""

    stage: np.ndarray
    rain: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class TrainResult:
    params: BaseModelParams
    point: GridPoint
    val_loss: float
    history: list = field(default_factory=list)  # rows: point, epoch, train_loss, val_loss, lr
    failures: list = field(default_factory=list)
    grid_losses: list = field(default_factory=list)


def fit_point(
    point: GridPoint,
    train: Dataset,
    val: Dataset,
    transitions: TransitionSet,
    target_index: int,
    *,
    K: int,
    T: int,
    seed: int,
    max_epochs: int,
    patience: int = 10,
    horizon: int = 1,
    target: str = "stage",
    init=init_params,
    forward_fn=forward_batch,
):
    """Adam training of one grid point with early stopping on validation weighted MSE."""
    norm = NormStats.fit(train.stage, train.rain, train.y)
    params = init(train.stage.shape[2], target_index, point.hidden_size, K, T, point.decoder_layers, seed, horizon)
    params.norm_stats = norm
    params.target = target
    weights = BinWeights.fit(train.y).scaled(norm.target_mean, norm.target_std)
    xs, xr = normalize_inputs(params, train.stage, train.rain)
    ys = (train.y - norm.target_mean) / norm.target_std
    vs, vr = normalize_inputs(params, val.stage, val.rain) if len(val) else (None, None)
    vy = (val.y - norm.target_mean) / norm.target_std if len(val) else None

    opt = nx.Adam(params.parameters(), lr=point.lr)
    rng = np.random.default_rng(seed + 7919)
    best, best_loss, since = params.copy(), math.inf, 0
    history = []
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(ys))
        total = 0.0
        for i in range(0, len(order), point.batch_size):
            idx = np.sort(order[i : i + point.batch_size])
            opt.zero_grad()
            loss = weighted_mse_loss(forward_fn(params, transitions, xs[idx], xr[idx]), ys[idx], weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        train_loss = total / len(ys)
        if vy is not None:
            val_loss = _epoch_loss_fn(forward_fn, params, transitions, vs, vr, vy, weights)
        else:
            val_loss = _epoch_loss_fn(forward_fn, params, transitions, xs, xr, ys, weights)
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": point.lr})
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best, best_loss, since = params.copy(), val_loss, 0
        else:
            since += 1
            if since >= patience:
                break
    return best, best_loss, history


def _epoch_loss_fn(forward_fn, params, transitions, stage, rain, y, weights, batch_size=1024):
    num = den = 0.0
    for i in range(0, len(y), batch_size):
        pred = forward_fn(params, transitions, stage[i : i + batch_size], rain[i : i + batch_size]).data
        w = weights(y[i : i + batch_size])
        num += float(np.sum(w * (pred - y[i : i + batch_size]) ** 2))
        den += float(np.sum(w))
    return num / den


def train(
    train_set: Dataset,
    val_set: Dataset,
    graph: WatershedGraph,
    grid=None,
    seed: int = 0,
    *,
    K: int = 2,
    T: int = 24,
    max_epochs: int = 50,
    patience: int = 10,
    horizon: int = 1,
    target: str = "stage",
    init=init_params,
    forward_fn=forward_batch,
) -> TrainResult:
    """Grid search; returns the point with lowest validation weighted MSE."""
    points = expand_grid(DEFAULT_GRID if grid is None else grid)
    if not points:
        raise ContractError("empty hyperparameter grid")
    transitions = build_transitions(graph, K)
    result = None
    failures, history, grid_losses = [], [], []
    for i, point in enumerate(points):
        try:
            params, loss, hist = fit_point(
                point,
                train_set,
                val_set,
                transitions,
                graph.target_index,
                K=K,
                T=T,
                seed=seed + 1000 * i,
                max_epochs=max_epochs,
                patience=patience,
                horizon=horizon,
                target=target,
                init=init,
                forward_fn=forward_fn,
            )
        except FloatingPointError as exc:
            log.warning("grid point %s aborted: %s", point, exc)
            failures.append({"point": asdict(point), "error": str(exc)})
            continue
        history.extend({"point": i, **row} for row in hist)
        grid_losses.append({"point": asdict(point), "val_loss": loss})
        if result is None or loss < result.val_loss:
            result = TrainResult(params, point, loss)
    if result is None:
        raise ContractError("every grid point diverged")
    result.history, result.failures, result.grid_losses = history, failures, grid_losses
    return result
