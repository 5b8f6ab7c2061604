import numpy as np
import pytest

from feddgsim.dataspace import DomainDataset


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def small_dataset(n_per_domain=(6, 5, 4), p=3, K=3, seed=0):
    rng = np.random.default_rng(seed)
    doms = np.repeat(np.arange(len(n_per_domain)), n_per_domain)
    n = doms.size
    return DomainDataset(rng.normal(size=(n, p)) + doms[:, None], rng.integers(0, K, n), doms)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
