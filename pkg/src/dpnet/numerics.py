"""Dense double-precision kernels shared by the whole package.

Every reduction here runs in a fixed order (left-to-right over the inner
index for matmul), so results are bit-reproducible across runs and across
worker-thread counts. No BLAS is involved: products are built from numpy
elementwise ops whose evaluation order is pinned.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

NORM_EPS = 1e-12

# Above this inner dimension the cumulative-sum formulation is faster than
# the per-k accumulation loop; both produce the identical left-to-right sum.
_MATMUL_K_SWITCH = 48
# Cap on the m*k*n temporary of the cumsum path (elements).
_MATMUL_TEMP_LIMIT = 1 << 24


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-dimensional, got shape {a.shape}")
    return a


def _as_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError(f"{name} must be 1-dimensional, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with a deterministic left-to-right inner sum.

    Entry (i, j) is accumulated exactly as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j])
    + ...)``, matching a naive triple loop bit for bit.
    """
    a = _as_matrix(a, "matmul left operand")
    b = _as_matrix(b, "matmul right operand")
    if a.shape[1] != b.shape[0]:
        raise ContractError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) x ({b.shape[0]}x{b.shape[1]})"
        )
    m, k = a.shape
    n = b.shape[1]
    if 0 < k <= _MATMUL_K_SWITCH or m * k * n > _MATMUL_TEMP_LIMIT:
        out = np.zeros((m, n), dtype=np.float64)
        for i in range(k):
            out += a[:, i : i + 1] * b[i]
        return out
    if k == 0:
        return np.zeros((m, n), dtype=np.float64)
    prod = a[:, :, None] * b[None, :, :]
    np.cumsum(prod, axis=1, out=prod)
    return np.ascontiguousarray(prod[:, -1, :])


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with the same summation order as `matmul`."""
    v = _as_vector(v, "matvec vector")
    return matmul(m, v[:, None]).ravel()


def softmax(v) -> np.ndarray:
    """Max-shifted softmax of a finite, nonempty vector."""
    v = _as_vector(v, "softmax input")
    if v.size == 0:
        raise ContractError("softmax input must be nonempty")
    if not np.isfinite(v).all():
        raise ContractError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def column_softmax(m) -> np.ndarray:
    """Softmax applied independently to every column of a matrix."""
    m = _as_matrix(m, "column_softmax input")
    if m.size == 0:
        raise ContractError("column_softmax input must be nonempty")
    if not np.isfinite(m).all():
        raise ContractError("column_softmax input must be finite")
    e = np.exp(m - m.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm via numpy's fixed pairwise summation (no BLAS)."""
    return float(np.sqrt(np.sum(v * v)))


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Scale `v` to unit norm; vectors with norm <= eps pass through."""
    v = _as_vector(v, "l2_normalize input")
    if v.size == 0:
        raise ContractError("l2_normalize input must be nonempty")
    n = l2_norm(v)
    if n > eps:
        return v / n
    return v.copy()


def normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization; returns (normalized, row_norms).

    Rows with norm <= eps are passed through unchanged, mirroring
    `l2_normalize`'s degenerate-vector guard.
    """
    norms = np.sqrt(np.sum(m * m, axis=1))
    safe = np.where(norms > eps, norms, 1.0)
    return m / safe[:, None], norms


def normalize_rows_backward(
    d_normed: np.ndarray, normed: np.ndarray, norms: np.ndarray, eps: float = NORM_EPS
) -> np.ndarray:
    """Backprop through `normalize_rows` (identity on guarded rows)."""
    dots = np.sum(d_normed * normed, axis=1, keepdims=True)
    grad = (d_normed - dots * normed) / np.where(norms > eps, norms, 1.0)[:, None]
    return np.where((norms > eps)[:, None], grad, d_normed)
