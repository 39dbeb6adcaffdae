"""Shared fixtures: a tiny model configuration and small synthetic datasets.

Everything here is sized for speed; the aggregate suite trains only
throwaway models on a single CPU core.
"""

import pytest
import torch

from dfinet.backbone import BackboneConfig
from dfinet.data import SyntheticSpec, generate_synthetic
from dfinet.dfim import DfimConfig
from dfinet.model import ModelConfig, build_model
from dfinet.tam import TamConfig
from dfinet.tasks import TASKS

torch.set_num_threads(1)


def tiny_model_config(tasks=TASKS, variant="sparse", tam_mode="shared",
                      rates=(2, 4, 8, 16), norm="group"):
    return ModelConfig(
        backbone=BackboneConfig(stage_channels=[4, 8, 8, 16, 16],
                                ppm_channels=16, norm=norm),
        dfim=DfimConfig(common_channels=8, variant=variant, tasks=tasks),
        tam=TamConfig(channels=8, mode=tam_mode),
        rates=list(rates),
        tasks=tasks,
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def synth_samples():
    """Eight 32x32 scenes with all three targets, fixed seed."""
    return generate_synthetic(SyntheticSpec(count=8, height=32, width=32, seed=3))


@pytest.fixture(scope="session")
def synth_datasets(synth_samples):
    return {task: synth_samples for task in TASKS}
