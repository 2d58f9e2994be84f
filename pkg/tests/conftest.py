import numpy as np
import pytest

from prunekit.data import Dataset, normalize_images


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_dataset(n=64, hw=28, classes=10, seed=7):
    """Random image/label set shaped like MNIST, for fast training tests."""
    r = np.random.default_rng(seed)
    pixels = r.integers(0, 256, size=(n, hw, hw), dtype=np.uint8)
    labels = r.integers(0, classes, size=n, dtype=np.int64)
    return Dataset(images=normalize_images(pixels), labels=labels)


@pytest.fixture
def tiny_dataset():
    return make_tiny_dataset()
