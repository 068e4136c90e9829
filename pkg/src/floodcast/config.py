"""Experiment configuration loaded from JSON.

Example::

    {
      "seed": 0,
      "synth": {"n_stations": 3, "n_hours": 17520, "hysteresis_gain": 0.3},
      "horizons": [1, 2, 3, 4, 5, 6],
      "training": {"grid": [{"batch_size": 64, "lr": 0.001}], "max_epochs": 40},
      "baselines": ["persistence", "linear", "plain_gru"],
      "residual": {"enable_stage3": true}
    }

Unknown keys are rejected so that typos surface as configuration errors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .baselines import KINDS
from .errors import ConfigError
from .model import HORIZONS, GridPoint, expand_grid
from .residual import ResidualConfig
from .synth import SynthScenario


@dataclass
class DataConfig:
    observations: list = field(default_factory=list)  # CSV paths; empty = use the run directory
    graph: str = ""
    curves: str = ""
    stations: list = field(default_factory=list)  # defaults to the graph's node order
    action_level: float | None = None  # target flood stage; defaults to the synthetic scenario's


@dataclass
class TrainingConfig:
    grid: list = field(default_factory=lambda: [asdict(GridPoint())])
    max_epochs: int = 40
    patience: int = 10
    K: int = 2
    baseline_max_epochs: int | None = None  # neural baselines; defaults to max_epochs


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: SynthScenario = field(default_factory=SynthScenario)
    data: DataConfig = field(default_factory=DataConfig)
    horizons: list = field(default_factory=lambda: list(HORIZONS))
    T: int = 24
    split: list = field(default_factory=lambda: [60.0, 15.0, 25.0])
    training: TrainingConfig = field(default_factory=TrainingConfig)
    baselines: list = field(default_factory=lambda: ["persistence", "linear", "mlp", "gbt", "plain_gru", "dcrnn_direct"])
    residual: ResidualConfig = field(default_factory=ResidualConfig)

    def validate(self) -> "ExperimentConfig":
        if not self.horizons or any(h not in HORIZONS for h in self.horizons):
            raise ConfigError(f"horizons must be a non-empty subset of 1..6, got {self.horizons}")
        if self.T < 1:
            raise ConfigError("T must be positive")
        if len(self.split) != 3 or abs(sum(self.split) - 100) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"split must be three percents summing to 100, got {self.split}")
        unknown = [b for b in self.baselines if b not in KINDS]
        if unknown:
            raise ConfigError(f"unknown baselines {unknown}; expected a subset of {list(KINDS)}")
        try:
            points = expand_grid(self.training.grid)
        except TypeError as exc:
            raise ConfigError(f"bad hyperparameter grid: {exc}") from None
        if not points:
            raise ConfigError("hyperparameter grid is empty")
        if self.training.max_epochs < 0 or self.training.patience < 1 or self.training.K < 1:
            raise ConfigError("training needs max_epochs >= 0, patience >= 1, K >= 1")
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        return self

    @property
    def action_level(self) -> float:
        return self.data.action_level if self.data.action_level is not None else self.synth.action_level

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, payload, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    extra = sorted(set(payload) - names)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(payload: dict) -> ExperimentConfig:
    payload = dict(payload)
    sub = {
        "synth": lambda p: _synth(p),
        "data": lambda p: _build(DataConfig, p, "data"),
        "training": lambda p: _build(TrainingConfig, p, "training"),
        "residual": lambda p: _build(ResidualConfig, p, "residual"),
    }
    for key, make in sub.items():
        if key in payload:
            payload[key] = make(payload[key])
    cfg = _build(ExperimentConfig, payload, "config")
    # one root seed drives everything, including the generator
    cfg.synth.seed = cfg.seed
    return cfg.validate()


def _synth(payload):
    if not isinstance(payload, dict):
        raise ConfigError("synth: expected an object")
    names = {f.name for f in fields(SynthScenario)}
    extra = sorted(set(payload) - names)
    if extra:
        raise ConfigError(f"synth: unknown keys {extra}")
    try:
        return SynthScenario.from_dict(payload)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_config(path=None, seed=None) -> ExperimentConfig:
    """Read a JSON config (defaults when ``path`` is None); ``seed`` overrides the root seed."""
    payload = {}
    if path is not None:
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    if seed is not None:
        payload["seed"] = int(seed)
    return config_from_dict(payload)
