import numpy as np
import pytest

from unitbt import numcore as nc


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build_loss, tensors, h: float = 1e-5, tol: float = 1e-4) -> float:
    """``build_loss()`` rebuilds a scalar Tensor from ``tensors``; returns the worst relative error."""
    loss = build_loss()
    grads = nc.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = grads.get(t, np.zeros_like(t.data)).copy()
        numeric = numeric_grad(lambda: float(build_loss().data), t.data, h)
        err = rel_error(analytic, numeric)
        assert err < tol, f"{t.name}: relative error {err:.2e}"
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
