"""Full network: shared backbone, one integration module per downsampling
rate, the attention gate, and per-task 1x1 prediction heads. Also hosts the
parameter-ownership accounting and the checkpoint file format."""

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dfinet.backbone import Backbone, BackboneConfig, build_backbone
from dfinet.dfim import RATES, DfimConfig, DynamicFeatureIntegration
from dfinet.errors import ConfigError
from dfinet.tam import TamConfig, TaskAdaptiveAttention
from dfinet.tasks import TASKS, check_tasks


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dfim: DfimConfig = field(default_factory=DfimConfig)
    tam: TamConfig = field(default_factory=TamConfig)
    rates: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    tasks: tuple[str, ...] = TASKS

    def validate(self):
        self.backbone.validate()
        self.dfim.validate()
        self.tam.validate()
        if not self.rates:
            raise ConfigError("rates: must be non-empty")
        for r in self.rates:
            if r not in RATES:
                raise ConfigError(f"rates: {r} not in {RATES}")
        if len(set(self.rates)) != len(self.rates):
            raise ConfigError(f"rates: duplicate entries in {self.rates}")
        self.tasks = check_tasks(self.tasks)
        if self.tam.channels != self.dfim.common_channels:
            raise ConfigError(
                "tam.channels: must match dfim.common_channels "
                f"({self.tam.channels} != {self.dfim.common_channels})"
            )
        return self


@dataclass
class ParameterBreakdown:
    backbone: int
    ppm: int
    dfims_shared: int
    tams: int
    per_task: dict[str, int]

    @property
    def shared(self) -> int:
        return self.backbone + self.ppm + self.dfims_shared + self.tams

    @property
    def total(self) -> int:
        return self.shared + sum(self.per_task.values())

    @property
    def shared_fraction(self) -> float:
        return self.shared / self.total


def _numel(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class MultiTaskNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone: Backbone = build_backbone(config.backbone)
        stage_channels = self.backbone.stage_output_channels
        self.dfims = nn.ModuleDict(
            {
                str(r): DynamicFeatureIntegration(
                    stage_channels,
                    replace(config.dfim, downsampling_rate=r, tasks=config.tasks),
                )
                for r in config.rates
            }
        )
        self.tam = TaskAdaptiveAttention(config.tam, config.tasks, config.backbone.norm)
        self.heads = nn.ModuleDict(
            {t: nn.Conv2d(config.dfim.common_channels, 1, 1) for t in config.tasks}
        )

    def _check_enabled(self, task: str):
        if task not in self.config.tasks:
            raise ConfigError(
                f"task {task!r} is not enabled in this model (tasks: {self.config.tasks})"
            )

    def _task_logits(self, bank, task, collect_attention=False):
        ph, pw = bank.input_size
        total = None
        profiles = {}
        attention = {}
        for dfim in self.dfims.values():
            feat, profile = dfim(bank, task)
            if profile is not None:
                profiles[(dfim.rate, task)] = profile
            if collect_attention and self.tam.config.mode != "off":
                gate = self.tam.attention_map(feat, task)
                attention[(dfim.rate, task)] = gate.detach()
                feat = feat * gate
            else:
                feat = self.tam(feat, task)
            up = F.interpolate(feat, size=(ph, pw), mode="bilinear", align_corners=False)
            total = up if total is None else total + up
        return self.heads[task](total), profiles, attention

    def forward(self, image: torch.Tensor, task: str) -> torch.Tensor:
        """Logits at the input resolution, shape (batch, 1, H, W)."""
        self._check_enabled(task)
        h, w = image.shape[-2:]
        bank = self.backbone(image)
        logits, _, _ = self._task_logits(bank, task)
        return logits[..., :h, :w]

    def forward_all(self, image: torch.Tensor, collect_attention: bool = False):
        """Run the backbone once and every enabled task branch.

        Returns (logits by task, selection profiles keyed by (rate, task));
        with collect_attention also the attention gates under the same keys.
        """
        h, w = image.shape[-2:]
        bank = self.backbone(image)
        logits = {}
        profiles = {}
        attention = {}
        for task in self.config.tasks:
            out, prof, attn = self._task_logits(bank, task, collect_attention)
            logits[task] = out[..., :h, :w]
            profiles.update(prof)
            attention.update(attn)
        if collect_attention:
            return logits, profiles, attention
        return logits, profiles

    def predict(self, image: torch.Tensor, task: str) -> torch.Tensor:
        """Probability map in [0, 1] at the input resolution."""
        return torch.sigmoid(self.forward(image, task))

    def parameter_breakdown(self) -> ParameterBreakdown:
        backbone_n = sum(_numel(s) for s in self.backbone.stages)
        ppm_n = _numel(self.backbone.ppm)
        dfims_shared = sum(_numel(d.align) for d in self.dfims.values())
        tams = _numel(self.tam.gate) if self.tam.config.mode == "shared" else 0
        per_task = {}
        for task in self.config.tasks:
            n = _numel(self.heads[task])
            for d in self.dfims.values():
                if hasattr(d, "task_select"):
                    n += _numel(d.task_select[task])
            if self.tam.config.mode == "unshared":
                n += _numel(self.tam.gates[task])
            per_task[task] = n
        return ParameterBreakdown(backbone_n, ppm_n, dfims_shared, tams, per_task)


def build_model(config: ModelConfig) -> MultiTaskNet:
    return MultiTaskNet(config)


# --- checkpoint file format ------------------------------------------------
#
# One file: a single-line JSON header (metadata plus the entry index), then
# the raw little-endian float32 data of every entry, concatenated in order.

CHECKPOINT_FORMAT = "dfinet-checkpoint"


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, model: nn.Module, *, config: dict | None = None,
                    step: int = 0, epoch: int = 0, seed: int = 0,
                    extra_meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None):
    entries = []
    blobs = []
    named = [(name, p.detach().cpu().numpy()) for name, p in model.named_parameters()]
    for name, arr in list(named) + sorted((extra_arrays or {}).items()):
        # asarray keeps 0-d extras 0-d; tobytes always emits C order
        arr = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": config,
        "step": step,
        "epoch": epoch,
        "seed": seed,
        "entries": entries,
    }
    header.update(extra_meta or {})
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            meta = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IOError(f"{path}: not a checkpoint file ({e})") from e
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise IOError(f"{path}: unrecognized checkpoint format {meta.get('format')!r}")
        arrays = {}
        for entry in meta["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = f.read(count * 4)
            if len(data) != count * 4:
                raise IOError(f"{path}: truncated data for entry {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return Checkpoint(meta, arrays)


def load_model_state(model: nn.Module, ckpt: Checkpoint):
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in ckpt.arrays]
    if missing:
        raise IOError(f"checkpoint is missing parameter entries: {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = ckpt.arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise IOError(
                    f"checkpoint entry {name!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model
