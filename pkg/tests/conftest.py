from __future__ import annotations

import numpy as np
import pytest

from mergelab import nets
from mergelab import tensor_core as tc
from mergelab.data import make_synthetic


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale statistical tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def f64():
    with tc.precision(64):
        yield


@pytest.fixture
def tiny_task():
    """4-class, 6-dimensional Gaussian clusters (small enough for full-batch checks)."""
    return make_synthetic(0, n_train=128, n_test=64, class_count=4, input_dim=6, seed=0)


@pytest.fixture
def mlp_arch():
    return nets.mlp([6, 5, 4], norm=False)


@pytest.fixture
def mlp_norm_arch():
    return nets.mlp([6, 8, 8, 4], norm=True)


@pytest.fixture
def cnn_arch():
    return nets.tiny_cnn((1, 4, 4), 3, channels=(2,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
