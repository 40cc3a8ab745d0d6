"""Dense vector/matrix primitives: distances, normalization, PCA.

Everything here is pure and operates on float64. PCA uses an exact
eigen-decomposition of the dim x dim covariance so results are
deterministic (no iterative solver).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import as_feature_matrix, as_vector, check_same_dim

__all__ = [
    "squared_distance",
    "l2_normalize",
    "l2_normalize_rows",
    "PcaReducer",
]


def squared_distance(x, y) -> float:
    """Squared Euclidean distance sum_d (x_d - y_d)^2.

    Symmetric, zero iff x == y. Raises on dimension mismatch.
    """
    x = as_vector(x, "x")
    y = as_vector(y, "y")
    check_same_dim(x, y)
    diff = x - y
    return float(diff @ diff)


def l2_normalize(x) -> np.ndarray:
    """Scale a vector to unit Euclidean norm. Zero-norm input is an error."""
    x = as_vector(x, "x")
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise ValueError("cannot l2-normalize a zero-norm vector")
    return x / norm


def l2_normalize_rows(X) -> np.ndarray:
    """Row-wise l2_normalize. Raises naming the first zero-norm row."""
    X = as_feature_matrix(X, "X")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot l2-normalize zero-norm row at index {zero[0]}")
    return X / norms[:, None]


class PcaReducer(BaseEstimator, TransformerMixin):
    """PCA to ``n_components`` dimensions via exact covariance eigendecomposition.

    Components are the top-k eigenvectors of the sample covariance, ordered
    by descending eigenvalue. The sign of each component is fixed by making
    its largest-magnitude entry positive, so fitted models are reproducible.
    Rank-deficient inputs still yield a full orthonormal basis (the
    eigensolver's completion); ``rank_deficient_`` flags that case.

    Parameters
    ----------
    n_components : int
        Target dimension k. Must satisfy k <= input dim.
    """

    def __init__(self, n_components: int = 64):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = as_feature_matrix(X, "X")
        n, d = X.shape
        if n < 2:
            raise ValueError(f"PCA needs at least 2 samples, got {n}")
        k = int(self.n_components)
        if k < 1:
            raise ValueError(f"n_components must be >= 1, got {k}")
        if k > d:
            raise ValueError(f"n_components={k} exceeds input dim {d}")

        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        cov = (centered.T @ centered) / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = eigvals[order]
        components = eigvecs[:, order].T[:k]

        # sign convention: largest-magnitude entry of each component positive
        for row in components:
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1.0

        variances = np.maximum(eigvals[:k], 0.0)
        tol = 1e-12 * max(1.0, float(eigvals[0]) if eigvals.size else 1.0)
        self.components_ = components
        self.explained_variance_ = variances
        self.rank_deficient_ = bool(np.any(eigvals[:k] <= tol))
        self.n_features_in_ = d
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "components_"):
            raise NotFittedError("PcaReducer is not fitted")
        X = as_feature_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"dimension mismatch: fitted on dim {self.n_features_in_}, "
                f"got dim {X.shape[1]}"
            )
        return (X - self.mean_) @ self.components_.T
