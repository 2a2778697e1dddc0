"""Dense float64 helpers, stable nonlinearities and a central-difference checker.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float64
REL_ERR_FLOOR = 1e-8


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


class NonFiniteError(ValueError):
    pass


def as_vector(v, name="vector"):
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(a, name="matrix"):
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def stable_log_softmax(v, axis=-1):
    """Log-softmax with the max shifted out, along ``axis``.

    Works on vectors and on batches (one distribution per row by default).
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log-softmax of an empty vector")
    check_finite(v, "log-softmax input")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(v, axis=-1):
    return np.exp(stable_log_softmax(v, axis=axis))


def log_sigmoid(z):
    """log(1 / (1 + exp(-z))) without overflow for either sign of z."""
    z = np.asarray(z, dtype=DTYPE)
    return -np.logaddexp(0.0, -z)


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(v):
    return np.maximum(np.asarray(v, dtype=DTYPE), 0.0)


def relu_grad(v):
    return (np.asarray(v) > 0).astype(DTYPE)


_STENCILS = {
    2: ((1.0, 1.0), (-1.0, -1.0)),
    4: ((-2.0, 1.0 / 12), (-1.0, -8.0 / 12), (1.0, 8.0 / 12), (2.0, -1.0 / 12)),
}


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5, order=2):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape).

    ``order=2`` is the textbook (f(x+h) - f(x-h)) / 2h; ``order=4`` uses the
    five-point stencil, which lets a larger ``h`` keep rounding noise down.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    if order not in _STENCILS:
        raise ValueError(f"order must be 2 or 4, got {order}")
    stencil = _STENCILS[order]
    scale = 2.0 * h if order == 2 else h
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for offset, weight in stencil:
            flat[i] = orig + offset * h
            val = float(f(x))
            if not np.isfinite(val):
                flat[i] = orig
                raise NonFiniteError(f"non-finite function value near coordinate {i}")
            acc += weight * val
        flat[i] = orig
        gflat[i] = acc / scale
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: int
    passed: bool


def grad_check(analytic, numeric, tol=1e-5):
    err = relative_error(analytic, numeric).reshape(-1)
    if err.size == 0:
        return GradCheckReport(0.0, -1, True)
    worst = int(np.argmax(err))
    return GradCheckReport(float(err[worst]), worst, bool(err[worst] <= tol))
