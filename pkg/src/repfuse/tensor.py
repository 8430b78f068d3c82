"""Dense float32 matrix substrate: products, row softmax, layer norm, symmetric eigen.

Values are stored as float32 (the on-disk embedding precision); every reduction
(matmul inner products, row statistics, the eigensolver) accumulates in float64
so covariance-level work downstream stays numerically trustworthy.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

DEFAULT_LN_EPS = 1e-5
SYMMETRY_TOL = 1e-6


def matrix(data) -> np.ndarray:
    """Validate and convert `data` into a finite float32 row-major 2-D array."""
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix must be non-empty, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DomainError("matrix entries must be finite")
    return m


def _as_2d(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = _as_2d(a, "a")
    b = _as_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if not np.isfinite(out).all():
        raise NumericalError("matmul result exceeds float32 range")
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    m = _as_2d(m, "m").astype(np.float64)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def layer_norm(m, gain, bias, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Per-row normalization to zero mean / unit variance, then affine gain+bias."""
    m = _as_2d(m, "m")
    gain = np.asarray(gain, dtype=np.float64).ravel()
    bias = np.asarray(bias, dtype=np.float64).ravel()
    d = m.shape[1]
    if gain.shape[0] != d or bias.shape[0] != d:
        raise ShapeError(
            f"gain/bias lengths ({gain.shape[0]}, {bias.shape[0]}) must equal cols ({d})"
        )
    x = m.astype(np.float64)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    return (gain * y + bias).astype(np.float32)


def svd_symmetric(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric matrix; eigenvalues descending.

    Returns float64 ``(eigenvalues, eigenvectors)`` with eigenvectors in
    columns, so ``a ~= V @ diag(w) @ V.T``. Asymmetry beyond a small
    scale-relative tolerance is rejected rather than silently symmetrized.
    """
    a = _as_2d(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"symmetric eigendecomposition needs a square matrix, got {a.shape}")
    a64 = a.astype(np.float64)
    scale = max(1.0, float(np.abs(a64).max()))
    if float(np.abs(a64 - a64.T).max()) > SYMMETRY_TOL * scale:
        raise DomainError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh((a64 + a64.T) / 2.0)
    return w[::-1].copy(), v[:, ::-1].copy()
