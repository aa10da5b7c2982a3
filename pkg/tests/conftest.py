import numpy as np
import pytest

from pcdiff.tensor import Tensor, make_rng


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-6) -> float:
    """Max relative error, ignoring entries whose absolute error is below ``abs_floor``."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff < abs_floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_grad(fn, x: np.ndarray, h: float = 1e-5) -> float:
    """Relative error between reverse-mode and finite-difference gradients of ``fn``."""
    t = Tensor(x, requires_grad=True)
    out = fn(t)
    out.backward()
    analytic = t.grad
    numeric = numeric_grad(lambda v: float(fn(Tensor(v)).data), x, h)
    return grad_error(analytic, numeric)


@pytest.fixture
def rng():
    return make_rng(1234)
