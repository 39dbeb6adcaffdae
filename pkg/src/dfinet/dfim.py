"""Dynamic feature integration: per task, score all backbone stages, keep the
top half by a hard median gate, and sum the kept probability-weighted stages.

All stages are first brought to a common channel width and downsampling rate.
Selection is content-dependent, computed per batch element.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from dfinet.backbone import FeatureBank
from dfinet.errors import ConfigError
from dfinet.tasks import TASKS, check_tasks

RATES = (2, 4, 8, 16)
VARIANTS = ("sparse", "dense", "identity")


@dataclass
class DfimConfig:
    common_channels: int = 16
    downsampling_rate: int = 4
    variant: str = "sparse"
    tasks: tuple[str, ...] = TASKS

    def validate(self):
        if self.common_channels < 1:
            raise ConfigError(f"common_channels: must be >= 1, got {self.common_channels}")
        if self.downsampling_rate not in RATES:
            raise ConfigError(
                f"downsampling_rate: must be one of {RATES}, got {self.downsampling_rate}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {VARIANTS}, got {self.variant!r}")
        check_tasks(self.tasks)
        return self


@dataclass
class SelectionProfile:
    """Per-element stage probabilities and the retained-stage mask of one
    integration module, for one task."""

    probabilities: torch.Tensor  # (batch, M)
    kept_mask: torch.Tensor  # (batch, M) bool
    rate: int
    task: str

    def mean_probabilities(self) -> torch.Tensor:
        return self.probabilities.mean(dim=0)

    def keep_frequency(self) -> torch.Tensor:
        return self.kept_mask.float().mean(dim=0)


def select_sparse(probs: torch.Tensor) -> torch.Tensor:
    """Mask of the top half of stage probabilities, exactly ceil(M/2) per row.

    The threshold is the (M/2)-th largest probability; ties are broken toward
    lower stage indices so the kept count is always exact.
    """
    half = (probs.shape[-1] + 1) // 2
    order = torch.argsort(-probs, dim=-1, stable=True)
    mask = torch.zeros_like(probs, dtype=torch.bool)
    mask.scatter_(-1, order[..., :half], True)
    return mask


def integrate(aligned, probs, mask, variant: str) -> torch.Tensor:
    """Combine aligned stages into one map.

    sparse:   sum of p_i * stage_i over kept stages (no renormalization)
    dense:    sum of p_i * stage_i over all stages
    identity: plain sum of the stages, probabilities unused
    """
    stack = torch.stack(list(aligned))
    if variant == "identity":
        return stack.sum(dim=0)
    if variant == "sparse":
        weights = probs * mask.to(probs.dtype)
    elif variant == "dense":
        weights = probs
    else:
        raise ConfigError(f"variant: must be one of {VARIANTS}, got {variant!r}")
    weights = weights.movedim(-1, 0)
    while weights.dim() < stack.dim():
        weights = weights.unsqueeze(-1)
    return (stack * weights).sum(dim=0)


class DynamicFeatureIntegration(nn.Module):
    """One integration module at a fixed output downsampling rate.

    The 1x1 stage projections are shared across tasks; only the small
    selection map (one affine layer per task) is task-specific.
    """

    def __init__(self, stage_channels: list[int], config: DfimConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.rate = config.downsampling_rate
        self.num_stages = len(stage_channels)
        self.align = nn.ModuleList(
            nn.Conv2d(c, config.common_channels, 1) for c in stage_channels
        )
        if config.variant != "identity":
            self.task_select = nn.ModuleDict(
                {t: nn.Linear(config.common_channels, self.num_stages) for t in config.tasks}
            )

    def align_stages(self, bank: FeatureBank) -> list[torch.Tensor]:
        h, w = bank.input_size
        target = (h // self.rate, w // self.rate)
        out = []
        for conv, stage in zip(self.align, bank.stages):
            x = conv(stage)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            out.append(x)
        return out

    def selection_logits(self, aligned, task: str) -> torch.Tensor:
        pooled = torch.stack(list(aligned)).sum(dim=0).mean(dim=(2, 3))
        return self.task_select[task](pooled)

    def forward(self, bank: FeatureBank, task: str):
        """Returns the integrated feature and the selection profile
        (None in the identity variant, where no selection is computed)."""
        aligned = self.align_stages(bank)
        if self.config.variant == "identity":
            return integrate(aligned, None, None, "identity"), None
        probs = torch.softmax(self.selection_logits(aligned, task), dim=-1)
        if self.config.variant == "sparse":
            mask = select_sparse(probs)
        else:
            mask = torch.ones_like(probs, dtype=torch.bool)
        feature = integrate(aligned, probs, mask, self.config.variant)
        profile = SelectionProfile(probs.detach(), mask.detach(), self.rate, task)
        return feature, profile
