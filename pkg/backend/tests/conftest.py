# backend/tests/conftest.py
import numpy as np
import pytest

from app.schemas.config import ExperimentConfig
from app.services.scene_service import build_rig, generate_scene

TINY_CONFIG = {
    "scene": {"grid": [8, 8, 8], "num_classes": 3, "min_objects": 1, "max_objects": 2},
    "rig": {"image_size": [6, 8]},
    "clustering": {"r": 2, "proto_iters": 2, "s_target": 4},
    "model": {
        "query_grid": [2, 2, 2],
        "d": 6,
        "encoder_layers": 1,
        "n_points": 2,
        "decoder_stages": [
            {"kernel": [2, 2, 2], "stride": [2, 2, 2]},
            {"kernel": [2, 2, 2], "stride": [2, 2, 2]},
            {"kernel": [1, 1, 1], "stride": [1, 1, 1]},
        ],
    },
    "epochs": 2,
    "train_scenes": 2,
    "val_scenes": 1,
}


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run long training experiments"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def tiny_rig(tiny_config):
    return build_rig(tiny_config.rig)


@pytest.fixture
def tiny_scenes(tiny_config, tiny_rig):
    return [(generate_scene(tiny_config.scene, seed), tiny_rig) for seed in (11, 12)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
