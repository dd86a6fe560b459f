"""Shared fixtures: the project root on sys.path and a tiny synthetic dataset."""

import os
import sys

import pytest

_PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _PROJECT_ROOT not in sys.path:
    sys.path.insert(0, _PROJECT_ROOT)

from modules.demo_data import make_synthetic_dataset  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, set REALMIX_RUN_SLOW=1 to run")


@pytest.fixture(scope="session")
def tiny_data():
    """(train, test) with 8×8 images: 30 train / 6 test samples per class."""
    return make_synthetic_dataset(seed=0, train_per_class=30, test_per_class=6, image_size=8)


@pytest.fixture(scope="session")
def tiny_train(tiny_data):
    return tiny_data[0]


@pytest.fixture(scope="session")
def tiny_test(tiny_data):
    return tiny_data[1]
