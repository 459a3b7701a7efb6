import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_pairs(n, seed, shape=(2, 8, 8)):
    """Pairs (x, x + eps * y) with eps spread so chunk distances vary."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = crandn(rng, shape)
        eps = rng.uniform(0.0, 1.5)
        out.append((x, x + eps * crandn(rng, shape)))
    return out
