import numpy as np
import pytest

FD_STEP = 1e-5


def fd_grad(f, arr, step=FD_STEP):
    """Central-difference gradient of scalar ``f()`` wrt every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr, dtype=float)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + step
        up = f()
        arr[i] = orig - step
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * step)
    return g


def rel_err(analytic, numeric, floor=1e-7):
    """Max abs deviation scaled by the largest gradient magnitude of the tensor."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
