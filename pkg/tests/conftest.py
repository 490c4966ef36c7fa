"""Shared test helpers: finite differences against scalar-valued functions."""

import numpy as np


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        hi = f(bumped.reshape(x.shape))
        bumped[i] -= 2 * eps
        lo = f(bumped.reshape(x.shape))
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom
