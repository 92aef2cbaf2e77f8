import numpy as np
import pytest

from qnnprune import data as dm
from qnnprune.data import Dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk experiments")


def _standardize(images):
    x = images.astype(np.float32) / 255.0
    return (x - 0.5) / 0.5


@pytest.fixture(scope="session")
def synthetic_train():
    xs, ys = dm.make_synthetic_images(5000, seed=7)
    return Dataset(_standardize(xs), ys)


@pytest.fixture(scope="session")
def synthetic_val():
    xs, ys = dm.make_synthetic_images(1000, seed=8)
    return Dataset(_standardize(xs), ys)


@pytest.fixture(scope="session")
def synthetic_train_small():
    xs, ys = dm.make_synthetic_images(2000, seed=17)
    return Dataset(_standardize(xs), ys)


@pytest.fixture(scope="session")
def synthetic_val_small():
    xs, ys = dm.make_synthetic_images(500, seed=18)
    return Dataset(_standardize(xs), ys)
