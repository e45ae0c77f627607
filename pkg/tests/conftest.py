import logging

import numpy as np
import pytest

from slimdet.config import ArchConfig, RunConfig, SlimDetConfig, TrainConfig
from slimdet.dataset import render_dataset
from slimdet.detector import build_mfssd
from slimdet.graph import init_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """32x32 input, narrow widths, four levels (8, 4, 2, 1)."""
    return ArchConfig.tiny()


@pytest.fixture
def tiny_train():
    return TrainConfig(epochs=1, batch_size=4, warmup_epochs=0, lr_step_epochs=[], seed=5)


@pytest.fixture
def tiny_config(tiny_arch, tiny_train):
    run = RunConfig(arch=tiny_arch, train=tiny_train)
    return SlimDetConfig(run=run, log_level=logging.WARNING)


@pytest.fixture
def tiny_model(tiny_arch):
    graph = build_mfssd(tiny_arch)
    return graph, init_params(graph, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Eight 32x32 images with small objects only."""
    return render_dataset(seed=3, n_images=8, image_size=32, small_fraction=1.0)
