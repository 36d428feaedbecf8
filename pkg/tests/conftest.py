import numpy as np
import pytest

from cvs.datasets import SampleCollection, builtin_spec, generate_synthetic_shapes
from cvs.networks import NetworkConfig
from cvs.training import TrainConfig

TINY_NETWORK = NetworkConfig(backbone="wide-resnet", depth=10, width=1, dropout=0.0)


@pytest.fixture
def tiny_network():
    return TINY_NETWORK


@pytest.fixture
def quick_train():
    return TrainConfig(method="cvs", epochs=1, batch_size=8, lr=0.05, seed=0)


@pytest.fixture
def shapes():
    """30 synthetic shape samples (10 per class) with exact masks."""
    spec = builtin_spec("synthetic-shapes", "train", seed=0)
    return SampleCollection(spec, generate_synthetic_shapes(30, seed=0, prefix="train"))


@pytest.fixture
def shapes_test():
    spec = builtin_spec("synthetic-shapes", "test", seed=0)
    return SampleCollection(spec, generate_synthetic_shapes(30, seed=99, prefix="test"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
