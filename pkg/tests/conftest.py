from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from maxdrop.tensor import Tensor, backward

FIXTURES = Path(str(resources.files("maxdrop") / "fixtures"))


def central_diff(f, arrays, h=1e-4):
    """Central-difference gradients of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = float(f())
            arr[i] = old - h
            down = float(f())
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Largest absolute deviation, relative to the largest numeric gradient entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12))


def check_grads(build_loss, tensors, h=1e-4):
    """Analytic gradients of ``build_loss()`` vs central differences; returns the worst relative error."""
    for t in tensors:
        t.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    numeric = central_diff(lambda: build_loss().data, [t.data for t in tensors], h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def tracked(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), tracked=True)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)
