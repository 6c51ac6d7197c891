import os
from pathlib import Path

import numpy as np
import pytest

from netspectra.data import Dataset, synth_blobs
from netspectra.nn import init_network
from netspectra.trainer import Schedule, TrainConfig, train

MNIST_DIR = Path(os.environ.get("NETSPECTRA_MNIST", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs() -> Dataset:
    return synth_blobs(4, 6, 15, 6.0, seed=7)


@pytest.fixture(scope="session")
def small_net(blobs):
    """A trained [6, 8, 4] ReLU net (92 parameters) at full training accuracy."""
    net = init_network([6, 8, 4], "uniform", 3)
    net, _, _ = train(net, blobs, TrainConfig(Schedule("constant", 0.05), batch_size=16, epochs=60, seed=1))
    return net


@pytest.fixture(scope="session")
def random_batch():
    rng = np.random.default_rng(99)
    return rng.normal(size=(12, 6)), rng.integers(0, 4, 12)
