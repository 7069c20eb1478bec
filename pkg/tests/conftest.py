import numpy as np
import pytest
import torch

from pgst.datagen import DetectionDataset, generate_scene
from pgst.groundnet import GroundingModel, ModelConfig
from pgst.prompts import DRIVING_CLASSES, benchmark_vocabulary


@pytest.fixture(scope="session")
def vocab():
    return benchmark_vocabulary(DRIVING_CLASSES)


@pytest.fixture(scope="session")
def tiny_model(vocab):
    """Full-size model, shared read-only across tests."""
    return GroundingModel(ModelConfig(), vocab, seed=0)


@pytest.fixture(scope="session")
def toy_model(vocab):
    """Two-level four-channel model for gradient checks."""
    cfg = ModelConfig(level_channels=(4, 8), embed_dim=8, proposal_cap=8,
                      anchor_sizes=(3.0, 5.0))
    return GroundingModel(cfg, vocab, seed=1, dtype=torch.float64)


def make_scenes(seed, count, prefix="s", canvas=128):
    return [
        generate_scene(np.random.default_rng([seed, i]), f"{prefix}{i:04d}", canvas)
        for i in range(count)
    ]


@pytest.fixture(scope="session")
def small_train():
    return DetectionDataset(make_scenes(10, 16, "tr"), classes=DRIVING_CLASSES)


@pytest.fixture(scope="session")
def small_val():
    return DetectionDataset(make_scenes(11, 8, "va"), classes=DRIVING_CLASSES)
