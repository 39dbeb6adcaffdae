"""Backbone contracts: padding, norm construction, stage geometry, and the
pyramid pooling block."""

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dfinet.backbone import (
    STRIDES,
    Backbone,
    BackboneConfig,
    PyramidPooling,
    build_backbone,
    group_count,
    make_norm,
    pad_to_multiple,
)
from dfinet.errors import ConfigError


def small_backbone(norm="group"):
    torch.manual_seed(0)
    return build_backbone(
        BackboneConfig(stage_channels=[4, 8, 8, 16, 16], ppm_channels=16, norm=norm)
    )


# --- padding ------------------------------------------------------------


def test_pad_to_multiple_exact_size_is_identity():
    x = torch.randn(1, 3, 32, 48)
    assert pad_to_multiple(x, 16) is x


@given(h=st.integers(1, 40), w=st.integers(1, 40))
@settings(max_examples=30, deadline=None)
def test_pad_to_multiple_shape_and_content(h, w):
    x = torch.randn(1, 2, h, w)
    padded = pad_to_multiple(x, 16)
    assert padded.shape[-2] % 16 == 0 and padded.shape[-1] % 16 == 0
    assert padded.shape[-2] - h < 16 and padded.shape[-1] - w < 16
    assert torch.equal(padded[..., :h, :w], x)


def test_pad_to_multiple_replicates_border():
    x = torch.arange(6.0).reshape(1, 1, 2, 3)
    padded = pad_to_multiple(x, 4)
    # bottom rows repeat the last input row, right columns the last column
    assert torch.equal(padded[0, 0, 2, :3], x[0, 0, 1, :])
    assert torch.equal(padded[0, 0, :2, 3], x[0, 0, :, 2])
    assert padded[0, 0, 3, 3] == x[0, 0, 1, 2]


# --- normalization ------------------------------------------------------


def test_group_count_prefers_eight():
    assert group_count(16) == 8
    assert group_count(8) == 8
    assert group_count(12) == 4
    assert group_count(6) == 2
    assert group_count(5) == 1


def test_make_norm_kinds():
    assert isinstance(make_norm("group", 16), torch.nn.GroupNorm)
    assert isinstance(make_norm("batch", 16), torch.nn.BatchNorm2d)


def test_make_norm_min_group_width_caps_groups():
    # 8 groups of width 1 would leave one value per group on a 1x1 map
    norm = make_norm("group", 8, min_group_width=2)
    assert norm.num_groups == 4
    norm(torch.randn(1, 8, 1, 1))


# --- stage geometry -----------------------------------------------------


def test_strides_tuple():
    assert STRIDES == (2, 4, 8, 16, 16, 16)


def test_backbone_stage_shapes():
    net = small_backbone()
    bank = net(torch.randn(2, 3, 64, 64))
    assert bank.input_size == (64, 64)
    assert len(bank.stages) == 6
    for stage, stride in zip(bank.stages, STRIDES):
        assert stage.shape[-2:] == (64 // stride, 64 // stride)
        assert stage.shape[0] == 2


def test_backbone_pads_odd_inputs():
    net = small_backbone()
    bank = net(torch.randn(1, 3, 37, 50))
    # the bank reports the padded 48x64 canvas; callers crop afterwards
    assert bank.input_size == (48, 64)
    assert bank.stages[0].shape[-2:] == (24, 32)
    assert bank.stages[-1].shape[-2:] == (3, 4)


def test_backbone_batch_norm_variant_runs():
    net = small_backbone(norm="batch")
    net.eval()
    with torch.no_grad():
        bank = net(torch.randn(1, 3, 32, 32))
    assert len(bank.stages) == 6


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(stage_channels=[4, 8, 8, 16], ppm_channels=16).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(stage_channels=[4, 8, 8, 16, 16], ppm_channels=16,
                       norm="layer").validate()


# --- pyramid pooling ----------------------------------------------------


def test_ppm_output_channels_and_size():
    torch.manual_seed(0)
    ppm = PyramidPooling(16, 16, bin_sizes=(1, 2, 3, 6))
    out = ppm(torch.randn(2, 16, 4, 4))
    assert out.shape == (2, 16, 4, 4)


def test_ppm_zero_input_gives_constant_output():
    # every conv is 1x1, so a spatially constant input stays spatially
    # constant through pooling, fusion, and normalization
    torch.manual_seed(1)
    ppm = PyramidPooling(16, 16, bin_sizes=(1, 2, 3, 6))
    out = ppm(torch.zeros(1, 16, 6, 6))
    assert torch.equal(out, out[..., :1, :1].expand_as(out))


def test_ppm_handles_maps_smaller_than_bins():
    torch.manual_seed(0)
    ppm = PyramidPooling(16, 16, bin_sizes=(1, 2, 3, 6))
    out = ppm(torch.randn(1, 16, 2, 2))
    assert out.shape == (1, 16, 2, 2)
