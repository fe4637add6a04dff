"""Central finite-difference gradient checking for layers and models (float64)."""
from __future__ import annotations

import numpy as np

FD_STEP = 1e-5


def numerical_gradient(f, x, step=FD_STEP):
    """Central differences of the scalar function ``f`` w.r.t. every element of ``x`` (in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f()
        flat[i] = orig - step
        minus = f()
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise |a - n| / max(|a|, |n|), treating pairs both below ``floor`` as equal."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.maximum(denom, floor)
    err[denom < floor] = 0.0
    return float(err.max()) if err.size else 0.0


def tensor_relative_error(analytic, numeric, floor=1e-9):
    """``||a - n|| / max(||a||, ||n||)`` over a whole gradient tensor.

    Returns 0 when both norms are below ``floor`` (a gradient that is zero by
    construction, e.g. a bias feeding straight into batch norm).

    Unlike the elementwise measure this is not dominated by components that
    sit at the finite-difference noise floor.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / denom) if denom >= floor else 0.0
