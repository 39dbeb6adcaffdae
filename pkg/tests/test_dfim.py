"""Stage selection and integration: the hard half-gate, the three variants,
and their exact algebraic relationships."""

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dfinet.backbone import BackboneConfig, build_backbone
from dfinet.dfim import (
    RATES,
    DfimConfig,
    DynamicFeatureIntegration,
    SelectionProfile,
    integrate,
    select_sparse,
)
from dfinet.errors import ConfigError
from dfinet.tasks import TASKS


def make_bank(batch=2, size=32, seed=0):
    torch.manual_seed(seed)
    net = build_backbone(
        BackboneConfig(stage_channels=[4, 8, 8, 16, 16], ppm_channels=16)
    )
    return net(torch.randn(batch, 3, size, size)), net.stage_output_channels


def make_dfim(channels, rate=4, variant="sparse", seed=0):
    torch.manual_seed(seed)
    cfg = DfimConfig(common_channels=8, downsampling_rate=rate, variant=variant)
    return DynamicFeatureIntegration(channels, cfg)


# --- hard gate ----------------------------------------------------------


def test_select_sparse_frozen_example():
    probs = torch.tensor([[0.4, 0.1, 0.1, 0.1, 0.1, 0.2]])
    mask = select_sparse(probs)
    # 0.4 and 0.2 are kept outright; the 0.1 tie resolves to index 1
    assert mask.tolist() == [[True, True, False, False, False, True]]


def test_select_sparse_all_equal_keeps_first_half():
    probs = torch.full((1, 6), 1.0 / 6.0)
    assert select_sparse(probs).tolist() == [[True, True, True, False, False, False]]


def test_select_sparse_odd_count_keeps_ceil():
    probs = torch.tensor([[0.5, 0.1, 0.2, 0.15, 0.05]])
    mask = select_sparse(probs)
    assert mask.sum().item() == 3
    assert mask.tolist() == [[True, False, True, True, False]]


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6),
       st.lists(st.floats(-10, 10), min_size=6, max_size=6))
@settings(max_examples=50, deadline=None)
def test_select_sparse_keeps_exactly_half(a, b):
    probs = torch.softmax(torch.tensor([a, b]), dim=-1)
    mask = select_sparse(probs)
    assert torch.all(mask.sum(dim=-1) == 3)
    # every kept probability is >= every dropped probability
    for row_p, row_m in zip(probs, mask):
        assert row_p[row_m].min() >= row_p[~row_m].max()


# --- integration algebra --------------------------------------------------


def test_integrate_sparse_matches_manual_sum():
    torch.manual_seed(0)
    aligned = [torch.randn(2, 3, 4, 4) for _ in range(6)]
    probs = torch.softmax(torch.randn(2, 6), dim=-1)
    mask = select_sparse(probs)
    out = integrate(aligned, probs, mask, "sparse")
    expect = torch.zeros_like(aligned[0])
    for i in range(6):
        w = probs[:, i] * mask[:, i].float()
        expect = expect + w.view(2, 1, 1, 1) * aligned[i]
    assert torch.allclose(out, expect, atol=1e-6)


def test_integrate_identity_is_plain_sum():
    torch.manual_seed(0)
    aligned = [torch.randn(1, 2, 3, 3) for _ in range(6)]
    out = integrate(aligned, None, None, "identity")
    assert torch.equal(out, torch.stack(aligned).sum(dim=0))


def test_integrate_dense_uses_all_stages():
    torch.manual_seed(0)
    aligned = [torch.randn(1, 2, 3, 3) for _ in range(6)]
    probs = torch.softmax(torch.randn(1, 6), dim=-1)
    mask = torch.ones(1, 6, dtype=torch.bool)
    dense = integrate(aligned, probs, mask, "dense")
    sparse_all = integrate(aligned, probs, mask, "sparse")
    assert torch.equal(dense, sparse_all)


def test_integrate_rejects_unknown_variant():
    aligned = [torch.zeros(1, 1, 2, 2)]
    with pytest.raises(ConfigError):
        integrate(aligned, torch.ones(1, 1), torch.ones(1, 1, dtype=torch.bool), "mean")


def test_masked_stage_has_zero_sensitivity():
    # finite difference through integrate: perturbing a dropped stage must
    # not move the output at all
    torch.manual_seed(0)
    aligned = [torch.randn(1, 2, 3, 3, dtype=torch.float64) for _ in range(6)]
    probs = torch.tensor([[0.30, 0.25, 0.20, 0.10, 0.10, 0.05]], dtype=torch.float64)
    mask = select_sparse(probs)
    assert mask.tolist() == [[True, True, True, False, False, False]]
    base = integrate(aligned, probs, mask, "sparse")
    bumped = [a.clone() for a in aligned]
    bumped[4] += 1e-3
    moved = integrate(bumped, probs, mask, "sparse")
    assert torch.max(torch.abs(moved - base)).item() < 1e-8


# --- module behaviour -----------------------------------------------------


def test_dfim_output_shape_per_rate():
    bank, channels = make_bank(batch=2, size=32)
    for rate in RATES:
        dfim = make_dfim(channels, rate=rate)
        out, profile = dfim(bank, "edge")
        assert out.shape == (2, 8, 32 // rate, 32 // rate)
        assert isinstance(profile, SelectionProfile)
        assert profile.rate == rate


def test_dfim_profile_probabilities_and_mask():
    bank, channels = make_bank()
    dfim = make_dfim(channels)
    _, profile = dfim(bank, "saliency")
    sums = profile.probabilities.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
    assert torch.all(profile.kept_mask.sum(dim=-1) == 3)
    assert profile.mean_probabilities().shape == (6,)
    assert profile.keep_frequency().shape == (6,)


def test_dfim_identity_variant_returns_no_profile():
    bank, channels = make_bank()
    dfim = make_dfim(channels, variant="identity")
    out, profile = dfim(bank, "edge")
    assert profile is None
    aligned = dfim.align_stages(bank)
    assert torch.equal(out, torch.stack(aligned).sum(dim=0))


def test_dfim_selection_differs_across_tasks():
    bank, channels = make_bank()
    dfim = make_dfim(channels)
    _, p_edge = dfim(bank, "edge")
    _, p_sal = dfim(bank, "saliency")
    assert not torch.equal(p_edge.probabilities, p_sal.probabilities)


def test_dfim_align_projects_every_stage():
    bank, channels = make_bank(batch=1, size=32)
    dfim = make_dfim(channels, rate=8)
    aligned = dfim.align_stages(bank)
    assert len(aligned) == 6
    for x in aligned:
        assert x.shape == (1, 8, 4, 4)


def test_dfim_config_validation():
    with pytest.raises(ConfigError):
        DfimConfig(downsampling_rate=3).validate()
    with pytest.raises(ConfigError):
        DfimConfig(variant="soft").validate()
    with pytest.raises(ConfigError):
        DfimConfig(common_channels=0).validate()
