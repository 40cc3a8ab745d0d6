"""Independent oracles used across the test suite.

Everything here deliberately avoids the library's own code paths: scalar
Python loops, SVD where the library uses an eigensolver, exhaustive
enumeration where the library uses an iterative algorithm. Oracle results
are what the implementation must match.
"""

import numpy as np


def scalar_squared_distance(x, y):
    return sum((float(a) - float(b)) ** 2 for a, b in zip(x, y))


def scalar_mean(rows):
    n = len(rows)
    d = len(rows[0])
    return [sum(float(r[k]) for r in rows) / n for k in range(d)]


def scalar_mean_valued_loss(positives, negatives, alpha):
    """Pure-float evaluation of the mean-anchored hinge sum."""
    c = scalar_mean(positives)
    dn = [scalar_squared_distance(c, n) for n in negatives]
    star = min(range(len(negatives)), key=lambda i: (dn[i], i))
    total = 0.0
    for p in positives:
        s = scalar_squared_distance(p, c) + alpha - dn[star]
        if s > 0.0:
            total += 0.5 * s
    return total


def scalar_icv_loss(positives, group_ids, negatives, alpha1, alpha2):
    """Pure-float evaluation: inter part + per-group intra hinges."""
    total = scalar_mean_valued_loss(positives, negatives, alpha1)
    for g in sorted(set(group_ids)):
        members = [p for p, gid in zip(positives, group_ids) if gid == g]
        outside = [p for p, gid in zip(positives, group_ids) if gid != g]
        if not outside:
            continue
        center = scalar_mean(members)
        dj = [scalar_squared_distance(center, o) for o in outside]
        j = min(range(len(outside)), key=lambda i: (dj[i], i))
        for m in members:
            s = scalar_squared_distance(center, m) + alpha2 - dj[j]
            if s > 0.0:
                total += 0.5 * s
    return total


def brute_force_average_precision(relevance):
    """AP via O(n^2) rescanning of every prefix (no cumulative tricks)."""
    relevant_ranks = [k for k in range(1, len(relevance) + 1) if relevance[k - 1]]
    total = 0.0
    for k in relevant_ranks:
        hits = 0
        for pos in range(k):
            if relevance[pos]:
                hits += 1
        total += hits / k
    return total / len(relevant_ranks)


def partition_objective(X, mask):
    """k-means objective of the 2-partition given by a boolean mask."""
    total = 0.0
    for part in (X[mask], X[~mask]):
        if len(part):
            mu = part.mean(axis=0)
            total += float(((part - mu) ** 2).sum())
    return total


def best_two_partition(X):
    """Globally optimal 2-means partition of 2-D points.

    The optimal partition is separated by the perpendicular bisector of its
    own two centroids, hence linearly separable; all linearly separable
    bipartitions arise as prefix cuts of the points sorted along some
    direction normal to a pair difference. Enumerating those directions and
    cuts is exhaustive for points in general position.

    Returns (objective, mask) with mask[i] = True for one side.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    total_sq = float((X**2).sum())
    best_obj = np.inf
    best_mask = None
    directions = []
    for i in range(n):
        for j in range(i + 1, n):
            d = X[j] - X[i]
            directions.append(np.array([-d[1], d[0]]))
            directions.append(np.array([d[1], -d[0]]))
    for u in directions:
        order = np.argsort(X @ u, kind="stable")
        sorted_pts = X[order]
        prefix = np.cumsum(sorted_pts, axis=0)
        total = prefix[-1]
        for cut in range(1, n):
            s1 = prefix[cut - 1]
            s2 = total - s1
            obj = total_sq - float(s1 @ s1) / cut - float(s2 @ s2) / (n - cut)
            if obj < best_obj - 1e-12:
                best_obj = obj
                mask = np.zeros(n, dtype=bool)
                mask[order[:cut]] = True
                best_mask = mask
    return best_obj, best_mask


def random_orthogonal(rng, d):
    """Haar-ish random orthogonal matrix via QR with positive diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def two_blob_data(n_per=20, centers=((0.0, 0.0), (10.0, 10.0)), sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    parts = [c + sigma * rng.standard_normal((n_per, 2)) for c in centers]
    membership = np.repeat(np.arange(len(centers)), n_per)
    return np.vstack(parts), membership


def dense_context_grad(output, n_rows, dim):
    """LossOutput grads dict -> dense (n_rows, dim), zero where absent."""
    g = np.zeros((n_rows, dim))
    for k, vec in output.grads.items():
        g[k] = vec
    return g
