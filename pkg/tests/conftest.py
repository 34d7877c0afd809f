import warnings

import numpy as np
import pytest

from riskwrap.errors import DegenerateDimensionWarning


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arrays``."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f()
            a[i] = old - h
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(autouse=True)
def _quiet_degenerate_dims():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDimensionWarning)
        yield


@pytest.fixture
def cubic_small():
    from riskwrap.data import make_cubic

    return make_cubic(n_train=400, n_test=121, seed=0)
