"""Multi-stage convolutional feature extractor with a pyramid-pooling top.

Six stages are tapped: five conv stages at strides [2, 4, 8, 16, 16] (the
last one dilated instead of strided) plus a pyramid-pooled summary of the
top stage at the same resolution.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from dfinet.errors import ConfigError

STRIDES = (2, 4, 8, 16, 16, 16)


@dataclass
class BackboneConfig:
    input_channels: int = 3
    stage_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    ppm_channels: int = 64
    ppm_bin_sizes: list[int] = field(default_factory=lambda: [1, 2, 3, 6])
    M: int = 6
    norm: str = "group"

    def validate(self):
        if self.M != 6:
            raise ConfigError(f"M: must be 6, got {self.M}")
        if len(self.stage_channels) != self.M - 1:
            raise ConfigError(
                f"stage_channels: expected {self.M - 1} entries, got {len(self.stage_channels)}"
            )
        for name, value in [("input_channels", self.input_channels), ("ppm_channels", self.ppm_channels)]:
            if value < 1:
                raise ConfigError(f"{name}: must be >= 1, got {value}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels: all entries must be >= 1, got {self.stage_channels}")
        if not self.ppm_bin_sizes or any(b < 1 for b in self.ppm_bin_sizes):
            raise ConfigError(f"ppm_bin_sizes: all entries must be >= 1, got {self.ppm_bin_sizes}")
        if self.norm not in ("group", "batch"):
            raise ConfigError(f"norm: must be 'group' or 'batch', got {self.norm!r}")
        return self


@dataclass
class FeatureBank:
    """Ordered stage outputs, one tensor per tap, with their strides."""

    stages: list[torch.Tensor]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        assert len(self.stages) == len(self.strides)

    @property
    def input_size(self) -> tuple[int, int]:
        """Spatial size of the (padded) input the bank was computed from."""
        h, w = self.stages[0].shape[-2:]
        return h * self.strides[0], w * self.strides[0]


def group_count(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def make_norm(kind: str, channels: int, min_group_width: int = 1) -> nn.Module:
    """Normalization layer per the config switch.

    `min_group_width` caps the group count so each group keeps at least that
    many channels; the pyramid branches need width 2 because their pooled
    maps can be 1x1, where a single-channel group has nothing to normalize.
    """
    if kind == "group":
        groups = group_count(channels)
        while groups > 1 and channels // groups < min_group_width:
            groups //= 2
        return nn.GroupNorm(groups, channels)
    return nn.BatchNorm2d(channels)


def pad_to_multiple(x: torch.Tensor, multiple: int = 16) -> torch.Tensor:
    """Pad bottom/right by edge replication so H and W divide `multiple`."""
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x
    return F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")


def _conv_block(in_ch, out_ch, norm, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        make_norm(norm, out_ch),
        nn.ReLU(inplace=True),
    )


class PyramidPooling(nn.Module):
    """Multi-bin global pooling fused back into the top-stage feature map."""

    def __init__(self, in_channels: int, out_channels: int, bin_sizes, norm: str = "group"):
        super().__init__()
        self.bin_sizes = list(bin_sizes)
        branch_ch = max(2, out_channels // len(self.bin_sizes))
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, branch_ch, 1, bias=False),
                make_norm(norm, branch_ch, min_group_width=2),
                nn.ReLU(inplace=True),
            )
            for _ in self.bin_sizes
        )
        fused_in = in_channels + branch_ch * len(self.bin_sizes)
        self.fuse = nn.Conv2d(fused_in, out_channels, 1)
        self.post = nn.Sequential(make_norm(norm, out_channels), nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        parts = [x]
        for bin_size, branch in zip(self.bin_sizes, self.branches):
            # bins larger than the map degenerate to per-pixel pooling
            bins = (min(bin_size, h), min(bin_size, w))
            pooled = F.adaptive_avg_pool2d(x, bins)
            pooled = branch(pooled)
            parts.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False))
        return self.post(self.fuse(torch.cat(parts, dim=1)))


class Backbone(nn.Module):
    """Toy feature extractor producing a six-stage FeatureBank."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        chans = config.stage_channels
        ins = [config.input_channels] + chans[:-1]
        stages = []
        for i, (c_in, c_out) in enumerate(zip(ins, chans)):
            if i < 4:
                stages.append(
                    nn.Sequential(
                        _conv_block(c_in, c_out, config.norm, stride=2),
                        _conv_block(c_out, c_out, config.norm),
                    )
                )
            else:
                # top stage trades stride for dilation, keeping stride 16
                stages.append(
                    nn.Sequential(
                        _conv_block(c_in, c_out, config.norm, dilation=2),
                        _conv_block(c_out, c_out, config.norm, dilation=2),
                    )
                )
        self.stages = nn.ModuleList(stages)
        self.ppm = PyramidPooling(chans[-1], config.ppm_channels, config.ppm_bin_sizes, config.norm)

    @property
    def stage_output_channels(self) -> list[int]:
        return list(self.config.stage_channels) + [self.config.ppm_channels]

    def forward(self, x: torch.Tensor) -> FeatureBank:
        x = pad_to_multiple(x, 16)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        outs.append(self.ppm(outs[-1]))
        return FeatureBank(outs)


def build_backbone(config: BackboneConfig) -> Backbone:
    return Backbone(config)
