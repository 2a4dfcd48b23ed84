"""Dense float64 matrix kernels and their analytic derivatives.

Matrices are 2-D C-contiguous ``numpy.float64`` arrays, row-major, one row
per sample. All arithmetic runs in 64-bit regardless of how the inputs were
stored on disk. Every differentiable kernel has a matching ``*_vjp`` that
pulls an upstream gradient back to the operands, so the training loop can
stay tape-free.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DegenerateInputError, ShapeError

# Row norms below this are treated as zero rows.
_ZERO_NORM_EPS = 1e-300


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array with at least one row and column."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {m.shape}")
    return m


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with 64-bit accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    _count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def matmul_vjp(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``matmul(a, b)`` w.r.t. both operands."""
    return grad_out @ b.T, a.T @ grad_out


def row_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, shape [rows]."""
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Raises ``DegenerateInputError`` on any all-zero row instead of emitting
    NaN.
    """
    m = as_matrix(m)
    norms = row_norms(m)
    if np.any(norms <= _ZERO_NORM_EPS):
        bad = int(np.argmax(norms <= _ZERO_NORM_EPS))
        raise DegenerateInputError(f"row {bad} has zero norm, cannot normalize")
    _count_macs(2 * m.shape[0] * m.shape[1])
    return m / norms[:, None]


def l2_normalize_rows_vjp(grad_out: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient of ``l2_normalize_rows(m)`` w.r.t. ``m``.

    For a row x with norm r and unit vector u = x/r, the pullback of g is
    (g - (g.u) u) / r.
    """
    norms = row_norms(m)
    unit = m / norms[:, None]
    dots = np.einsum("ij,ij->i", grad_out, unit)
    return (grad_out - dots[:, None] * unit) / norms[:, None]


def cosine_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity: out[i, j] = cos(x_i, y_j), shape [rx, ry]."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"cosine_rows: col dims differ, {x.shape} vs {y.shape}")
    return matmul(l2_normalize_rows(x), l2_normalize_rows(y).T)


def cosine_rows_vjp(grad_out: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Gradients of ``cosine_rows(x, y)`` w.r.t. both inputs."""
    xn = x / row_norms(x)[:, None]
    yn = y / row_norms(y)[:, None]
    grad_xn, grad_ynt = matmul_vjp(grad_out, xn, yn.T)
    return (
        l2_normalize_rows_vjp(grad_xn, x),
        l2_normalize_rows_vjp(grad_ynt.T, y),
    )


def sigmoid(x):
    """Numerically stable logistic function, elementwise on arrays or scalars."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_vjp(grad_out, x):
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(grad_out: np.ndarray, m: np.ndarray) -> np.ndarray:
    s = softmax_rows(m)
    dots = np.einsum("ij,ij->i", grad_out, s)
    return s * (grad_out - dots[:, None])


def abs_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a - b|."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _require_same_shape(a, b, "abs_diff")
    return np.abs(a - b)


def exp_elementwise(m: np.ndarray) -> np.ndarray:
    return np.exp(as_matrix(m))


def exp_elementwise_vjp(grad_out: np.ndarray, m: np.ndarray) -> np.ndarray:
    return grad_out * np.exp(m)


def scale(m: np.ndarray, s: float) -> np.ndarray:
    return as_matrix(m) * float(s)


def scale_vjp(grad_out: np.ndarray, s: float) -> np.ndarray:
    return grad_out * float(s)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _require_same_shape(a, b, "add")
    return a + b


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit).

    Independent of any analytic derivative above; used to audit them.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Multiply-add accounting. Kernels report into the active counter (if any) so
# an instrumented forward pass can be compared against analytic counts.
# ---------------------------------------------------------------------------

_active_counter: list = []


class MacCounter:
    """Accumulates multiply-add counts reported by the kernels."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


def _count_macs(n: int) -> None:
    if _active_counter:
        _active_counter[-1].add(n)


def count_macs_explicit(n: int) -> None:
    """Report ``n`` multiply-adds done outside the kernels in this module."""
    _count_macs(n)


@contextlib.contextmanager
def counting_macs():
    """Context manager yielding a ``MacCounter`` active for the duration."""
    counter = MacCounter()
    _active_counter.append(counter)
    try:
        yield counter
    finally:
        _active_counter.pop()
