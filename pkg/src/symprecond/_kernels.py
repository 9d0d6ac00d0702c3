"""Compiled inner loops for the sequential relaxation sweeps."""
import numpy as np
from numba import njit


@njit(cache=True)
def sor_forward(indptr, indices, data, diag, b, x, omega):
    """In-place forward SOR sweep on ``x``."""
    n = b.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j != i:
                s -= data[k] * x[j]
        x[i] = (1.0 - omega) * x[i] + omega * s / diag[i]


@njit(cache=True)
def sor_backward(indptr, indices, data, diag, b, x, omega):
    """In-place backward SOR sweep on ``x``."""
    n = b.shape[0]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j != i:
                s -= data[k] * x[j]
        x[i] = (1.0 - omega) * x[i] + omega * s / diag[i]


@njit(cache=True)
def lower_solve(indptr, indices, data, diag, r, omega):
    """Solve ``(D + omega L) y = r``."""
    n = r.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = r[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j < i:
                s -= omega * data[k] * y[j]
        y[i] = s / diag[i]
    return y


@njit(cache=True)
def upper_solve(indptr, indices, data, diag, r, omega):
    """Solve ``(D + omega U) y = r``."""
    n = r.shape[0]
    y = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = r[i]
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j > i:
                s -= omega * data[k] * y[j]
        y[i] = s / diag[i]
    return y
