import numpy as np
import pytest

from hieropo import HierModelConfig, LoggedDataset


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + 0.2 * np.eye(d))


def random_instance(rng, d, m, n, sigma=None):
    """Random model plus a dataset drawn from it, feature rows inside the unit ball."""
    config = HierModelConfig(
        rng.normal(size=d), random_spd(rng, d), random_spd(rng, d), sigma or rng.uniform(0.3, 1.5)
    )
    X = rng.uniform(-1, 1, size=(n, d))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1, keepdims=True))
    tasks = rng.integers(m, size=n)
    y = rng.normal(size=n)
    return config, LoggedDataset(tasks, np.zeros(n, int), X, y, m, d)


@pytest.fixture
def scalar_config():
    """Sigma_q = Sigma_0 = sigma = 1, mu_q = 0, d = 1."""
    return HierModelConfig([0.0], [[1.0]], [[1.0]], 1.0)


@pytest.fixture
def scalar_dataset():
    """One task, one record: phi = 1, y = 2."""
    return LoggedDataset([0], [0], [[1.0]], [2.0], m=1, d=1)
