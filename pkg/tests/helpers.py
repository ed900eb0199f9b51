"""Shared test oracles, independent of the package's own check utilities."""

from __future__ import annotations

import numpy as np


def rel_err(a, b, floor: float = 1e-12) -> float:
    """Norm-based relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a.ravel())), float(np.linalg.norm(b.ravel())), floor)
    return float(np.linalg.norm((a - b).ravel())) / denom


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar-valued f() wrt the array x in place."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def quantile_init_oracle(values, gamma: float) -> float:
    """Brute-force order-statistic reference for the step-size initializer."""
    ordered = sorted(float(v) for v in np.asarray(values).ravel())
    n = len(ordered)
    lo = min(int(gamma * n / 2.0), n - 1)
    hi = min(n - lo - 1, n - 1)
    return max(abs(ordered[lo]), abs(ordered[hi]), 1e-8)
