"""Run configuration: a single JSON file describing the model, training,
loss, data, and metric settings. CLI flags override individual fields, and
the effective (defaults-resolved) config is echoed to the output directory so
a run can be reproduced from that one artifact."""

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dfinet.backbone import BackboneConfig
from dfinet.data import Sample, SyntheticSpec, generate_synthetic, load_directory
from dfinet.dfim import DfimConfig
from dfinet.errors import ConfigError
from dfinet.losses import LossConfig
from dfinet.metrics import MatchTolerance
from dfinet.model import ModelConfig
from dfinet.tam import TamConfig
from dfinet.tasks import check_task, check_tasks
from dfinet.trainer import TrainConfig


@dataclass
class MetricsConfig:
    match_delta: float = 0.0075
    boundary_threshold_count: int = 99
    saliency_threshold_count: int = 255

    def validate(self) -> "MetricsConfig":
        if self.match_delta < 0:
            raise ConfigError(f"match_delta: must be >= 0, got {self.match_delta}")
        for name in ("boundary_threshold_count", "saliency_threshold_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        return self

    def tolerance(self) -> MatchTolerance:
        return MatchTolerance(self.match_delta)

    def boundary_thresholds(self) -> np.ndarray:
        n = self.boundary_threshold_count
        return np.arange(1, n + 1) / (n + 1)

    def saliency_thresholds(self) -> np.ndarray:
        n = self.saliency_threshold_count
        return np.arange(1, n + 1) / (n + 1)


@dataclass
class DataConfig:
    # exactly one source per task: a synthetic spec covers every task,
    # otherwise each task needs its own dataset directory
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> "DataConfig":
        if self.synthetic is not None:
            self.synthetic.validate()
        for task in self.paths:
            check_task(task)
        return self

    def validate_for_tasks(self, tasks) -> "DataConfig":
        self.validate()
        for task in tasks:
            sources = int(task in self.paths) + int(self.synthetic is not None)
            if sources == 0:
                raise ConfigError(f"data: no source for task {task!r}")
            if sources > 1:
                raise ConfigError(
                    f"data: task {task!r} has both a dataset path and a synthetic source"
                )
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "runs/out"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.loss.validate()
        self.data.validate()
        self.metrics.validate()
        if not self.output_dir:
            raise ConfigError("output_dir: must be a non-empty path")
        return self


def to_dict(config) -> dict:
    return dataclasses.asdict(config)


def _build(cls, payload: dict, section: str, tuple_fields=frozenset()):
    if not isinstance(payload, dict):
        raise ConfigError(f"{section}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown key {unknown[0]!r}")
    kwargs = {}
    for key, value in payload.items():
        if key in tuple_fields and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def run_config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config: top level must be an object")
    unknown = sorted(set(payload) - {"model", "train", "loss", "data", "metrics", "output_dir"})
    if unknown:
        raise ConfigError(f"config: unknown section {unknown[0]!r}")

    model_d = dict(payload.get("model", {}))
    backbone = _build(BackboneConfig, model_d.pop("backbone", {}), "model.backbone")
    dfim = _build(DfimConfig, model_d.pop("dfim", {}), "model.dfim", {"tasks"})
    tam = _build(TamConfig, model_d.pop("tam", {}), "model.tam")
    model = _build(
        ModelConfig,
        {**model_d, "backbone": backbone, "dfim": dfim, "tam": tam},
        "model", {"tasks"},
    )

    train = _build(TrainConfig, payload.get("train", {}), "train",
                   {"normalize_mean", "normalize_std"})
    loss = _build(LossConfig, payload.get("loss", {}), "loss")

    data_d = dict(payload.get("data", {}))
    synthetic_d = data_d.pop("synthetic", {})
    synthetic = None
    if synthetic_d is not None:
        synthetic = _build(SyntheticSpec, synthetic_d, "data.synthetic", {"tasks"})
    data = _build(DataConfig, {**data_d, "synthetic": synthetic}, "data")
    if data.paths and not isinstance(data.paths, dict):
        raise ConfigError("data.paths: expected an object mapping task to directory")

    metrics = _build(MetricsConfig, payload.get("metrics", {}), "metrics")
    output_dir = payload.get("output_dir", "runs/out")
    return RunConfig(model, train, loss, data, metrics, output_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return run_config_from_dict(payload)


def save_config(config: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


def load_datasets(data: DataConfig, tasks) -> dict[str, list[Sample]]:
    """Materialize one sample list per task from the configured sources."""
    tasks = check_tasks(tasks)
    data.validate_for_tasks(tasks)
    out = {}
    if data.synthetic is not None:
        spec = replace(data.synthetic, tasks=tasks)
        samples = generate_synthetic(spec)
        for task in tasks:
            out[task] = samples
    for task in tasks:
        if task in data.paths:
            out[task] = load_directory(data.paths[task], tasks=(task,))
    return out
