"""Shared fixtures: deterministic seeds and a reusable synthetic dataset."""

import numpy as np
import pytest
import torch

from crackseq.synth import SynthConfig, write_synthetic_dataset


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """A small deterministic belt sequence shared by dataset/CLI tests."""
    out_dir = tmp_path_factory.mktemp("synthdata")
    cfg = SynthConfig(width=64, height=64, num_frames=10, belt_speed=3.0,
                      crack_count=2, sequence_id="beltfix")
    annotation_file = write_synthetic_dataset(cfg, seed=11, out_dir=out_dir)
    return annotation_file
