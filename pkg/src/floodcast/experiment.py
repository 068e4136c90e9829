"""End-to-end runs: synthesize, train per horizon, forecast and correct, evaluate.

A run directory holds every artifact::

    observations.csv  graph.json  curves.json       inputs (written by ``synthesize``)
    truth.csv  scenario.json  events.csv            synthetic ground truth
    model_h{h}.json  train_log_h{h}.csv             checkpoints and training logs
    audit_h{h}.csv  residual_h{h}.json              corrected forecasts per horizon
    metrics.json  comparison.csv                    evaluation
    manifest_<command>.json                         provenance of each command
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, baselines, metrics, model
from .config import ExperimentConfig
from .errors import ConfigError
from .graph import WatershedGraph, build_transitions
from .ingest import HourlyFrame, WindowSet, load_and_resample, make_windows, split_bounds, split_windows
from .rating_curve import load_curves, save_curves
from .residual import PipelineResult, ResidualConfig, run_pipeline, write_audit
from .synth import SynthResult, derive_seed, generate
from .timefmt import format_time

log = logging.getLogger(__name__)

METRICS_SCHEMA = "floodcast-metrics/1"
SPLITS = ("train", "val", "test")
STAGES = ("ar_corrected", "stage1", "stage2", "stage3")


# --- provenance ----------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    versions: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)  # seconds per step

    @property
    def filename(self) -> str:
        return f"manifest_{self.command}.json"

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / self.filename
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def new_manifest(command: str, cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(
        command,
        cfg.digest(),
        cfg.seed,
        {"floodcast": __version__, "numpy": np.__version__, "python": platform.python_version()},
    )


class _Timer:
    def __init__(self, manifest: RunManifest, step: str):
        self.manifest, self.step = manifest, step

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.timings[self.step] = round(time.perf_counter() - self.t0, 3)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


# --- data ------------------------------------------------------------------------


@dataclass
class RunData:
    frame: HourlyFrame
    graph: WatershedGraph
    curves: dict  # station id -> RatingCurveSet
    action_level: float

    @property
    def target_curve(self):
        return self.curves[self.graph.target_id]


def data_paths(cfg: ExperimentConfig, run_dir) -> tuple:
    run_dir = Path(run_dir)
    obs = [Path(p) for p in cfg.data.observations] or [run_dir / "observations.csv"]
    graph = Path(cfg.data.graph) if cfg.data.graph else run_dir / "graph.json"
    curves = Path(cfg.data.curves) if cfg.data.curves else run_dir / "curves.json"
    return obs, graph, curves


def load_run_data(cfg: ExperimentConfig, run_dir) -> RunData:
    obs, graph_path, curves_path = data_paths(cfg, run_dir)
    for p in [*obs, graph_path, curves_path]:
        if not p.exists():
            raise ConfigError(f"missing input file {p}")
    graph = WatershedGraph.load(graph_path)
    stations = cfg.data.stations or graph.node_ids
    if list(stations) != list(graph.node_ids):
        raise ConfigError("configured stations must match the graph's node order")
    frame = load_and_resample(obs, stations, graph.target_id)
    curves = load_curves(curves_path)
    if graph.target_id not in curves:
        raise ConfigError(f"no rating curve for target station {graph.target_id}")
    return RunData(frame, graph, curves, cfg.action_level)


def input_digests(cfg, run_dir) -> dict:
    """sha256 per input; files inside the run directory are keyed by their relative path."""
    obs, graph_path, curves_path = data_paths(cfg, run_dir)
    root = Path(run_dir).resolve()

    def key(p):
        full = p.resolve()
        return str(full.relative_to(root)) if full.is_relative_to(root) else str(p)

    return {key(p): file_digest(p) for p in [*obs, graph_path, curves_path] if p.exists()}


def data_from_synth(result: SynthResult) -> RunData:
    return RunData(result.frame, result.graph, result.curves, result.scenario.action_level)


# --- synth -----------------------------------------------------------------------


def write_truth(path, result: SynthResult) -> None:
    """Per-hour target discharge: reported, true, and the injected relative error."""
    reported = result.frame.reported[:, result.frame.target_index]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "reported_cfs", "true_cfs", "injected_error_pct"])
        for t, r, q in zip(result.frame.timestamps, reported, result.true_discharge):
            w.writerow([format_time(t), repr(float(r)), repr(float(q)), repr(float(100.0 * (r - q) / r))])


def write_events(path, timestamps, stage, action_level) -> list:
    events = metrics.extract_flood_events(stage, action_level)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "end", "hours", "peak_stage_ft"])
        for s, e in events:
            w.writerow([format_time(timestamps[s]), format_time(timestamps[e - 1]), e - s,
                        repr(float(np.max(stage[s:e])))])
    return events


def synthesize(cfg: ExperimentConfig, out_dir) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = new_manifest("synth", cfg)
    with _Timer(manifest, "generate"):
        result = generate(cfg.synth)
    with _Timer(manifest, "write"):
        result.frame.write_csv(out / "observations.csv")
        result.graph.save(out / "graph.json")
        save_curves(out / "curves.json", list(result.curves.values()))
        write_truth(out / "truth.csv", result)
        stage = result.frame.stage[:, result.frame.target_index]
        events = write_events(out / "events.csv", result.frame.timestamps, stage, cfg.synth.action_level)
        scenario = {
            "manifest": manifest.filename,
            "scenario": cfg.synth.to_dict(),
            "injected_error": "none" if cfg.synth.hysteresis_gain == 0 else "hysteresis",
            "measurement_noise": "none" if cfg.synth.measurement_noise == 0 else "gaussian",
            "n_flood_events": len(events),
            "storm_depth_widenings": result.widened,
        }
        _write_json(out / "scenario.json", scenario)
    manifest.outputs = ["observations.csv", "graph.json", "curves.json", "truth.csv", "events.csv", "scenario.json"]
    manifest.write(out)
    return manifest


# --- training --------------------------------------------------------------------


def horizon_windows(data: RunData, cfg: ExperimentConfig, h: int):
    windows = make_windows(data.frame, cfg.T, h)
    return (windows, *split_windows(windows, len(data.frame), cfg.split))


def train_horizon(data: RunData, cfg: ExperimentConfig, h: int) -> model.TrainResult:
    _, tr, va, _ = horizon_windows(data, cfg, h)
    return model.train(
        tr.dataset("stage"), va.dataset("stage"), data.graph, cfg.training.grid,
        derive_seed(cfg.seed, f"base/h{h}"),
        K=cfg.training.K, T=cfg.T, max_epochs=cfg.training.max_epochs, patience=cfg.training.patience, horizon=h,
    )


def write_train_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_point", "epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["point"], row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def train_all(cfg: ExperimentConfig, run_dir, horizons=None) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = new_manifest("train", cfg)
    manifest.inputs = input_digests(cfg, run_dir)
    data = load_run_data(cfg, run_dir)
    for h in horizons or cfg.horizons:
        with _Timer(manifest, f"train_h{h}"):
            res = train_horizon(data, cfg, h)
        res.params.save(run_dir / f"model_h{h}.json", {
            "manifest": manifest.filename, "grid_point": asdict(res.point), "val_loss": res.val_loss,
            "failures": res.failures,
        })
        write_train_log(run_dir / f"train_log_h{h}.csv", res.history)
        manifest.outputs += [f"model_h{h}.json", f"train_log_h{h}.csv"]
        log.info("h=%d best %s val loss %.6f", h, res.point, res.val_loss)
    manifest.write(run_dir)
    return manifest


def load_checkpoint(run_dir, h) -> model.BaseModelParams:
    path = Path(run_dir) / f"model_h{h}.json"
    if not path.exists():
        raise ConfigError(f"no checkpoint for horizon {h} at {path}; run `train` first")
    return model.BaseModelParams.load(path)


# --- forecasting and correction --------------------------------------------------


@dataclass
class HorizonForecast:
    """Hourly series aligned on the frame's grid (NaN where no forecast exists)."""

    h: int
    times: np.ndarray
    stage_fc: np.ndarray
    base: np.ndarray  # discharge from the rating curve
    extrapolated: np.ndarray
    reported: np.ndarray
    measured: np.ndarray
    stage_obs: np.ndarray
    split_rows: tuple  # (b_train, b_val)

    def split_mask(self, name) -> np.ndarray:
        b1, b2 = self.split_rows
        rows = np.arange(len(self.times))
        return {"train": rows < b1, "val": (rows >= b1) & (rows < b2), "test": rows >= b2}[name]


def _aligned(n, rows, values, fill=np.nan):
    out = np.full(n, fill)
    out[rows] = values
    return out


def forecast_horizon(data: RunData, cfg: ExperimentConfig, params: model.BaseModelParams, h: int,
                     windows: WindowSet | None = None) -> HorizonForecast:
    windows = windows if windows is not None else make_windows(data.frame, cfg.T, h)
    transitions = build_transitions(data.graph, params.K)
    stage_fc = model.predict(params, transitions, windows.stage, windows.rain)
    q, ext = data.target_curve.flow_floored(stage_fc, windows.target_time)
    f = data.frame
    n, ti = len(f), f.target_index
    rows = windows.target_index_rows
    return HorizonForecast(
        h,
        f.timestamps,
        _aligned(n, rows, stage_fc),
        _aligned(n, rows, q),
        _aligned(n, rows, ext.astype(bool), fill=False),
        f.reported[:, ti].copy(),
        f.measured_at(f.timestamps),
        f.stage[:, ti].copy(),
        split_bounds(n, cfg.split),
    )


def correct_horizon(fc: HorizonForecast, residual: ResidualConfig) -> PipelineResult:
    """Residual cascade fitted on measured points of the training and validation portions."""
    fit_mask = fc.split_mask("train") | fc.split_mask("val")
    return run_pipeline(fc.base, fc.reported, fc.measured, fc.stage_fc, fit_mask, fc.h, residual)


def write_residual_state(path, result: PipelineResult, manifest_name) -> None:
    _write_json(path, {"manifest": manifest_name, **_jsonable(result.state.summary())})


def forecast_all(cfg: ExperimentConfig, run_dir, horizons=None) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = new_manifest("forecast", cfg)
    manifest.inputs = input_digests(cfg, run_dir)
    data = load_run_data(cfg, run_dir)
    for h in horizons or cfg.horizons:
        params = load_checkpoint(run_dir, h)
        with _Timer(manifest, f"forecast_h{h}"):
            fc = forecast_horizon(data, cfg, params, h)
            result = correct_horizon(fc, cfg.residual)
        has = np.isfinite(fc.base)
        write_audit(run_dir / f"audit_h{h}.csv", fc.times[has], _subset(result, has), fc.reported[has],
                    fc.measured[has], fc.extrapolated[has])
        write_residual_state(run_dir / f"residual_h{h}.json", result, manifest.filename)
        manifest.outputs += [f"audit_h{h}.csv", f"residual_h{h}.json"]
    manifest.write(run_dir)
    return manifest


def _subset(result: PipelineResult, mask) -> PipelineResult:
    return PipelineResult({k: v[mask] for k, v in result.series.items()}, result.state,
                          result.filter_pass[mask], result.clamped[mask], result.delta[mask])


# --- evaluation ------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def score(y, yhat, stage, action_level, mask) -> dict:
    """Metrics over ``mask`` rows where both series exist; peak metrics use observed stage events."""
    y, yhat, stage = (np.asarray(a, float) for a in (y, yhat, stage))
    keep = mask & np.isfinite(y) & np.isfinite(yhat)
    report = metrics.evaluate(y[keep], yhat[keep])
    idx = np.flatnonzero(mask)
    if idx.size and action_level is not None:
        # events on the contiguous split range; points without a forecast are skipped inside
        lo, hi = idx[0], idx[-1] + 1
        events = metrics.extract_flood_events(stage[lo:hi], action_level)
        peaks = metrics.peak_metrics(y[lo:hi], np.where(keep[lo:hi], yhat[lo:hi], np.nan), events) if events else []
        report.n_flood_events = len(peaks)
        report.events = [asdict(p) for p in peaks]
        if peaks:
            report.peak_bias = float(np.mean([p.peak_bias for p in peaks]))
            pcts = [p.peak_pct_bias for p in peaks if p.peak_pct_bias is not None]
            report.peak_pct_bias = float(np.mean(pcts)) if pcts else None
            report.peak_time_bias = float(np.mean([p.peak_time_bias for p in peaks]))
    return report.to_dict()


def baseline_forecasts(data: RunData, cfg: ExperimentConfig, h: int, kinds) -> dict:
    """Aligned discharge forecasts of each baseline over the whole grid."""
    windows, tr, va, _ = horizon_windows(data, cfg, h)
    n = len(data.frame)
    out = {}
    epochs = cfg.training.baseline_max_epochs
    for kind in kinds:
        kwargs = {}
        if kind in ("mlp", "plain_gru", "dcrnn_direct"):
            kwargs = dict(grid=cfg.training.grid, seed=derive_seed(cfg.seed, f"{kind}/h{h}"), K=cfg.training.K,
                          T=cfg.T, max_epochs=cfg.training.max_epochs if epochs is None else epochs,
                          patience=cfg.training.patience)
        fc = baselines.make_baseline(kind, data.graph, **kwargs).fit(tr, va)
        out[kind] = _aligned(n, windows.target_index_rows, fc.predict(windows))
    return out


def evaluate_horizon(data: RunData, cfg: ExperimentConfig, fc: HorizonForecast, result: PipelineResult,
                     baseline_fc: dict) -> list:
    """Rows of ``{model, horizon, split, reference, metrics}``."""
    rows = []
    level = data.action_level
    forecasts = {"dcrnn_rc": fc.base, **baseline_fc}
    corrected = {k: result.series[k] for k in STAGES}
    for split in SPLITS:
        mask = fc.split_mask(split)
        for name, series in forecasts.items():
            rows.append({"model": name, "horizon": fc.h, "split": split, "reference": "reported",
                         "metrics": score(fc.reported, series, fc.stage_obs, level, mask)})
        for name, series in {"dcrnn_rc": fc.base, **corrected}.items():
            rows.append({"model": name, "horizon": fc.h, "split": split, "reference": "measured",
                         "metrics": score(fc.measured, series, fc.stage_obs, level, mask)})
    return rows


COMPARISON_COLUMNS = ["horizon", "model", "reference", "n_points", "mae", "mape", "rmse", "bias", "nse", "cc",
                      "n_flood_events", "peak_bias", "peak_pct_bias", "peak_time_bias"]


def write_comparison(path, rows, split="test") -> list:
    table = []
    for r in rows:
        if r["split"] != split:
            continue
        m = r["metrics"]
        table.append([r["horizon"], r["model"], r["reference"]] + [m.get(c) for c in COMPARISON_COLUMNS[3:]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for row in table:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])
    return table


def evaluate_all(cfg: ExperimentConfig, run_dir, horizons=None) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = new_manifest("evaluate", cfg)
    manifest.inputs = input_digests(cfg, run_dir)
    data = load_run_data(cfg, run_dir)
    rows, residual = [], {}
    horizons = list(horizons or cfg.horizons)
    for h in horizons:
        params = load_checkpoint(run_dir, h)
        with _Timer(manifest, f"forecast_h{h}"):
            fc = forecast_horizon(data, cfg, params, h)
            result = correct_horizon(fc, cfg.residual)
        with _Timer(manifest, f"baselines_h{h}"):
            bfc = baseline_forecasts(data, cfg, h, cfg.baselines)
        rows += evaluate_horizon(data, cfg, fc, result, bfc)
        residual[str(h)] = result.state.summary()
    payload = {
        "schema": METRICS_SCHEMA,
        "manifest": manifest.filename,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "horizons": horizons,
        "action_level": data.action_level,
        "residual": residual,
        "results": rows,
    }
    _write_json(run_dir / "metrics.json", _jsonable(payload))
    write_comparison(run_dir / "comparison.csv", rows)
    manifest.outputs += ["metrics.json", "comparison.csv"]
    manifest.write(run_dir)
    return manifest


# --- in-memory runs (experiment scripts and acceptance checks) -------------------


@dataclass
class HorizonRun:
    train: model.TrainResult
    forecast: HorizonForecast
    corrected: PipelineResult


def run_horizons(data: RunData, cfg: ExperimentConfig, horizons=None, trained=None) -> dict:
    """Train (unless ``trained`` supplies a result), forecast and correct each horizon without touching disk."""
    out = {}
    for h in horizons or cfg.horizons:
        res = trained[h] if trained and h in trained else train_horizon(data, cfg, h)
        fc = forecast_horizon(data, cfg, res.params, h)
        out[h] = HorizonRun(res, fc, correct_horizon(fc, cfg.residual))
    return out
