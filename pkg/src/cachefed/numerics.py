"""Dense float64 kernels used by every other module.

Matrices are plain 2-D float64 numpy arrays in row-major order. All
reductions run with BLAS threading pinned to one thread (see package
__init__), so repeated runs of the same program are bit-identical.
Gradients elsewhere in the package are hand-derived; nothing here builds
an autodiff graph.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, LabelError, ShapeError

# Probabilities are clipped away from exact zero before taking logs so no
# Inf can escape cross_entropy even for saturated softmax rows.
_TINY = np.finfo(np.float64).tiny


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting non-finite entries."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class over rows.

    ``probabilities`` rows must already be distributions (e.g. softmax
    output); ``labels`` are integer class indices into the columns.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != probabilities.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match {probabilities.shape[0]} rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probabilities.shape[1]):
        raise LabelError(
            f"labels must lie in [0, {probabilities.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    picked = probabilities[np.arange(labels.shape[0]), labels]
    return float(-np.log(np.maximum(picked, _TINY)).mean())


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return m / norms


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes x n) matrix with column j the indicator of labels[j]."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((num_classes, labels.shape[0]), dtype=np.float64)
    out[labels, np.arange(labels.shape[0])] = 1.0
    return out
