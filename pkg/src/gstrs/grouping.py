"""Unsupervised within-class grouping.

Each class is partitioned into ``n_groups`` appearance modes by Lloyd's
k-means over (optionally dimension-reduced) features. Groups never span
classes. Clustering is deterministic given the seed, and invariant to the
order samples arrive in: within a class, points are processed in a
canonical (lexicographic) order, so permuting the dataset rows yields the
same partition.
"""

from __future__ import annotations

import csv

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import as_feature_matrix

__all__ = [
    "WithinClassKMeans",
    "lloyd_kmeans",
    "group_centers",
    "save_group_assignments",
    "load_group_assignments",
]


def _seed_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Probability-weighted farthest-point seeding (distance-squared weights)."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = np.einsum("ij,ij->i", X - centers[0], X - centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a center
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = X[idx]
        d_new = np.einsum("ij,ij->i", X - centers[j], X - centers[j])
        np.minimum(closest, d_new, out=closest)
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center assignment; exact ties go to the lowest group index."""
    diff = X[:, None, :] - centers[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    return np.argmin(d, axis=1)


def _objective(X: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    diff = X - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def lloyd_kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One seeded Lloyd run. Returns (centers, labels, objective_trace).

    The trace holds the objective after every full iteration and is
    non-increasing. Empty clusters are repaired by donating the point
    farthest from its current center.
    """
    n = X.shape[0]
    centers = _seed_centers(X, k, rng)
    labels = _assign(X, centers)
    trace = []
    for _ in range(max_iters):
        # update step
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = X[members].mean(axis=0)
        # repair empty clusters with the globally farthest point
        for j in range(k):
            if not (labels == j).any():
                resid = np.einsum("ij,ij->i", X - new_centers[labels], X - new_centers[labels])
                donor = int(np.argmax(resid))
                labels[donor] = j
                new_centers[j] = X[donor]
        centers = new_centers
        new_labels = _assign(X, centers)
        trace.append(_objective(X, centers, new_labels))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    # final centers consistent with the final assignment
    for j in range(k):
        members = labels == j
        if members.any():
            centers[j] = X[members].mean(axis=0)
    return centers, labels, np.asarray(trace)


class WithinClassKMeans(BaseEstimator):
    """Per-class k-means grouping.

    Parameters
    ----------
    n_groups : int
        Groups per class (G). Classes with fewer samples than G get one
        singleton group per sample; the leftover group ids are recorded in
        ``empty_groups_``.
    max_iters : int
        Lloyd iteration cap per restart.
    restarts : int
        Independent seeded runs per class; the best objective wins.
    seed : int
        Master seed. One child stream per class, keyed by position in the
        sorted class order. Combined with the canonical point order this
        makes the partition independent of dataset row order.

    Attributes (after fit)
    ----------------------
    labels_ : (n,) int array, group id per input row.
    centroids_ : dict class -> (k_c, dim) array of group centers.
    objective_ : dict class -> winning objective value.
    objective_trace_ : dict class -> per-iteration objective of the winning run.
    empty_groups_ : dict class -> list of group ids left empty (small classes).
    """

    def __init__(self, n_groups: int = 5, max_iters: int = 100, restarts: int = 5, seed: int = 0):
        self.n_groups = n_groups
        self.max_iters = max_iters
        self.restarts = restarts
        self.seed = seed

    def fit(self, X, y):
        X = as_feature_matrix(X, "X")
        y = np.asarray(y, dtype=str)
        if len(y) != X.shape[0]:
            raise ValueError("X and y have mismatched lengths")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

        classes = sorted(set(y.tolist()))
        streams = np.random.SeedSequence(self.seed).spawn(len(classes))
        labels = np.full(X.shape[0], -1, dtype=np.int64)
        self.centroids_ = {}
        self.objective_ = {}
        self.objective_trace_ = {}
        self.empty_groups_ = {}

        for cls, stream in zip(classes, streams):
            idx = np.flatnonzero(y == cls)
            pts = X[idx]
            # canonical processing order: lexicographic by coordinates
            canon = np.lexsort(pts.T[::-1])
            pts_c = pts[canon]
            m = len(idx)
            k = min(self.n_groups, m)
            if k == m:
                # one group per sample, ids in canonical order
                grp = np.empty(m, dtype=np.int64)
                grp[canon] = np.arange(m)
                labels[idx] = grp
                self.centroids_[cls] = pts_c.copy()
                self.objective_[cls] = 0.0
                self.objective_trace_[cls] = np.zeros(1)
            else:
                best = None
                rng_root = np.random.default_rng(stream)
                for _ in range(max(1, self.restarts)):
                    centers, lab, trace = lloyd_kmeans(pts_c, k, rng_root, self.max_iters)
                    obj = _objective(pts_c, centers, lab)
                    if best is None or obj < best[0]:
                        best = (obj, centers, lab, trace)
                obj, centers, lab, trace = best
                grp = np.empty(m, dtype=np.int64)
                grp[canon] = lab
                labels[idx] = grp
                self.centroids_[cls] = centers
                self.objective_[cls] = obj
                self.objective_trace_[cls] = trace
            if k < self.n_groups:
                self.empty_groups_[cls] = list(range(k, self.n_groups))

        self.classes_ = classes
        self.labels_ = labels
        return self

    def fit_predict(self, X, y) -> np.ndarray:
        return self.fit(X, y).labels_


def group_centers(embedded, group_labels, class_mask=None) -> dict[int, np.ndarray]:
    """Mean of each nonempty group, computed from the CURRENT embedded features.

    ``embedded`` holds one row per sample of a single class (or pass
    ``class_mask`` to select the class's rows); ``group_labels`` aligns
    with those rows. Returns {group id -> center vector}.
    """
    embedded = as_feature_matrix(embedded, "embedded")
    group_labels = np.asarray(group_labels, dtype=np.int64)
    if class_mask is not None:
        embedded = embedded[class_mask]
        group_labels = group_labels[class_mask]
    if embedded.shape[0] != group_labels.shape[0]:
        raise ValueError("embedded and group_labels have mismatched lengths")
    if embedded.shape[0] == 0:
        raise ValueError("no samples selected")
    centers = {}
    for g in np.unique(group_labels):
        centers[int(g)] = embedded[group_labels == g].mean(axis=0)
    return centers


GROUP_CSV_HEADER = ["sample_id", "class", "group"]


def save_group_assignments(path, sample_ids, classes, groups) -> None:
    """Write ``sample_id,class,group`` CSV (header required by the format)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROUP_CSV_HEADER)
        for sid, cls, grp in zip(sample_ids, classes, groups):
            writer.writerow([int(sid), cls, int(grp)])


def load_group_assignments(path) -> dict[int, tuple[str, int]]:
    """Read a group CSV into {sample_id -> (class, group)}.

    Lets externally produced groupings (e.g. attribute labels) be injected
    in place of the unsupervised clustering.
    """
    out: dict[int, tuple[str, int]] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != GROUP_CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(GROUP_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                sid = int(row[0])
                grp = int(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad integer field") from None
            if sid in out:
                raise ValueError(f"{path}:{lineno}: duplicate sample_id {sid}")
            if grp < 0:
                raise ValueError(f"{path}:{lineno}: negative group {grp}")
            out[sid] = (row[1].strip(), grp)
    return out
