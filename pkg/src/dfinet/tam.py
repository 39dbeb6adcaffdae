"""Task-adaptive attention: a sigmoid spatial gate rescaling each task's
integrated features. Sharing the gate's parameters across tasks couples the
branches, so every task's gradients shape one common attention function."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from dfinet.backbone import make_norm
from dfinet.errors import ConfigError
from dfinet.tasks import TASKS

MODES = ("shared", "unshared", "off")


@dataclass
class TamConfig:
    channels: int = 16
    mode: str = "shared"
    hidden_channels: int | None = None

    def __post_init__(self):
        if self.hidden_channels is None:
            self.hidden_channels = max(4, self.channels // 2)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.channels < 1:
            raise ConfigError(f"channels: must be >= 1, got {self.channels}")
        if self.hidden_channels < 1:
            raise ConfigError(f"hidden_channels: must be >= 1, got {self.hidden_channels}")
        return self


def _gate(channels: int, hidden: int, norm: str) -> nn.Sequential:
    # replicate padding keeps the gate translation-invariant on constants
    # width >= 2 keeps the norm usable on 1x1 maps (rate-16 branch of a
    # 16-pixel canvas), same constraint as the pyramid pooling branches
    return nn.Sequential(
        nn.Conv2d(channels, hidden, 3, padding=1, padding_mode="replicate", bias=False),
        make_norm(norm, hidden, min_group_width=2),
        nn.ReLU(inplace=True),
        nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="replicate"),
    )


class TaskAdaptiveAttention(nn.Module):
    def __init__(self, config: TamConfig, tasks: tuple[str, ...] = TASKS, norm: str = "group"):
        super().__init__()
        config.validate()
        self.config = config
        self.tasks = tasks
        if config.mode == "shared":
            self.gate = _gate(config.channels, config.hidden_channels, norm)
        elif config.mode == "unshared":
            self.gates = nn.ModuleDict(
                {t: _gate(config.channels, config.hidden_channels, norm) for t in tasks}
            )

    def attention_map(self, feature: torch.Tensor, task: str) -> torch.Tensor:
        """Single-channel gate in (0, 1), shape (batch, 1, H, W)."""
        if self.config.mode == "off":
            raise ConfigError("attention map is not computed when mode is 'off'")
        gate = self.gate if self.config.mode == "shared" else self.gates[task]
        return torch.sigmoid(gate(feature))

    def forward(self, feature: torch.Tensor, task: str) -> torch.Tensor:
        if self.config.mode == "off":
            return feature
        return feature * self.attention_map(feature, task)
