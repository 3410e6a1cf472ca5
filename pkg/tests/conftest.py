import numpy as np
import pytest


def rand_pd(rng, k, ridge=None):
    """Random symmetric positive-definite k x k matrix."""
    a = rng.standard_normal((k, k))
    return a @ a.T + (k if ridge is None else ridge) * np.eye(k)


def rand_orth(rng, r, u=None):
    """Random semi-orthogonal r x u basis (square orthogonal when u is None)."""
    if u is None:
        u = r
    q, _ = np.linalg.qr(rng.standard_normal((r, u)))
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
