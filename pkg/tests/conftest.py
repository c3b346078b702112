import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def binomial_sigma(p, n):
    return float(np.sqrt(max(p * (1 - p), 1e-12) / n))
