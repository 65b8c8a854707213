"""Shared fixtures: seeded generators, the tiny four-class model and a scratch config file."""

import json

import numpy as np
import pytest

from canseg.models.schemas import RunConfig
from canseg.nn.can import CanModel
from canseg.services.gradcheck_suite import tiny_model_config


@pytest.fixture
def rng():
    """Seeded generator for reproducible random inputs."""
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config():
    """Four classes, 32×32 inputs."""
    return tiny_model_config(seed=0)


@pytest.fixture
def tiny_model(tiny_config):
    return CanModel(tiny_config)


@pytest.fixture
def tiny_run_config(tiny_config, tmp_path):
    """RunConfig around the tiny model, writing into tmp_path, a handful of iterations."""
    return RunConfig.model_validate(
        {
            "model": tiny_config.model_dump(),
            "train": {
                "seed": 5,
                "schedule": {"base_lr": 0.02, "max_iter": 4},
                "dataset": {"height": 32, "width": 32, "batch_size": 2, "val_size": 2},
                "log_interval": 1,
                "val_interval": 2,
            },
            "io": {
                "weights": str(tmp_path / "tiny.canw"),
                "checkpoint_dir": str(tmp_path / "ckpt"),
                "output_dir": str(tmp_path / "out"),
            },
        }
    )


@pytest.fixture
def config_file(tiny_run_config, tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_run_config.model_dump(mode="json")))
    return path
