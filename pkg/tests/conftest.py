import numpy as np
import pytest


def make_blobs(rng, centers, std=1.0, n_per=100):
    """Stacked Gaussian blobs with labels, one blob per row of ``centers``."""
    centers = np.asarray(centers, dtype=np.float64)
    data = np.vstack([rng.normal(c, std, (n_per, centers.shape[1])) for c in centers])
    labels = np.repeat(np.arange(len(centers)), n_per)
    return data, labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
