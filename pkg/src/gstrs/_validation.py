"""Input validation helpers shared across the package.

All numeric inputs are coerced to 64-bit float arrays so that downstream
gradient checks are meaningful; feature files store 32-bit and are widened
on load.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_feature_matrix",
    "as_vector",
    "check_finite",
    "check_same_dim",
    "check_labels",
]


def check_finite(arr: np.ndarray, name: str) -> None:
    """Raise ValueError if ``arr`` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values (NaN/Inf)")


def as_feature_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 matrix of shape (n_samples, dim).

    Requires n_samples >= 1 and dim >= 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, dim), got ndim={X.ndim}")
    n, d = X.shape
    if n < 1 or d < 1:
        raise ValueError(f"{name} must be at least 1x1, got shape {X.shape}")
    check_finite(X, name)
    return X


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite float64 vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={x.ndim}")
    check_finite(x, name)
    return x


def check_same_dim(x: np.ndarray, y: np.ndarray, xname: str = "x", yname: str = "y") -> None:
    """Raise ValueError unless the trailing dimensions agree."""
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {xname} has dim {x.shape[-1]}, {yname} has dim {y.shape[-1]}"
        )


def check_labels(labels, n_classes: int, name: str = "labels") -> np.ndarray:
    """Validate integer class labels in [0, n_classes)."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"{name} must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"{name} out of range: expected [0, {n_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels
