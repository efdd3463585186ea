"""Dense linear algebra and moment primitives.

Matrices are plain 2-D numpy arrays with the batch axis first (N rows)
and the channel axis second (C columns), float64 by default; float32 is
the opt-in training precision.

Variance is always the population variance (divisor m, never m - 1).
This differs from the default of many statistics libraries and matters:
the normalization layers divide by sqrt of exactly this quantity.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order.

    Each output element accumulates a[i, k] * b[k, j] for k = 0..K-1 in
    that exact order (one rounding per product, one per add), so results
    are bitwise reproducible and equal to a naive triple loop.  BLAS may
    reorder or fuse the accumulation, which is why it is not used here.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D arrays, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    # add.reduce over the middle axis applies the adds in index order,
    # which is exactly the naive left-to-right accumulation.
    return np.add.reduce(a[:, :, None] * b[None, :, :], axis=1)


def moments(values: np.ndarray, index_set=None) -> tuple[float, float]:
    """Mean and population variance over the selected positions.

    ``index_set`` is an iterable of positions into the flattened vector;
    None selects every position.  The divisor is the number of selected
    positions m, not m - 1.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if index_set is None:
        selected = values
    else:
        idx = np.asarray(list(index_set), dtype=np.intp)
        if idx.size == 0:
            raise DomainError("moments requires a non-empty index set")
        selected = values[idx]
    if selected.size == 0:
        raise DomainError("moments requires a non-empty index set")
    mean = float(selected.mean())
    var = float(np.mean((selected - mean) ** 2))
    return mean, var


def row_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and population variance, shapes (N, 1)."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return mean, var
