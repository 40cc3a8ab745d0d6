"""Randomized gradient verification across every differentiable path.

Builds seeded random instances of each loss family and compares analytic
gradients against central finite differences via :func:`gstrs.losses.grad_check`.
Instances span mean-valued and sample-valued anchors, grouped and ungrouped
contexts, and linear and hidden-layer embeddings. Used by the ``gradcheck``
CLI command and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossConfig,
    TripletContext,
    grad_check,
    gs_trs_loss,
    icv_triplet_loss,
    mean_valued_triplet_loss,
    softmax_cross_entropy,
    triplet_loss,
)
from .model import ClassifierHead, backprop_embedding, embed_with_cache, init_embedding

__all__ = ["FamilyReport", "run_gradient_suite", "GRADIENT_FAMILIES"]

GRADIENT_FAMILIES = (
    "triplet_loss",
    "mean_valued_triplet_loss",
    "icv_triplet_loss",
    "softmax_cross_entropy",
    "gs_trs_loss",
    "backprop_embedding",
)


@dataclass
class FamilyReport:
    """Worst finite-difference deviation over one family's instances."""

    family: str
    max_rel_error: float
    n_instances: int
    n_coords_checked: int
    n_coords_unstable: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _instance_shape(rng: np.random.Generator):
    dim = int(rng.integers(4, 17))
    n_pos = int(rng.integers(3, 9))
    n_neg = int(rng.integers(2, 7))
    n_groups = int(rng.integers(2, 5))
    return dim, n_pos, n_neg, n_groups


def _random_points(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    # scale so typical squared distances are O(1), giving a healthy mix of
    # active and inactive hinge terms under O(1) margins
    return rng.standard_normal((n, dim)) / np.sqrt(dim)


def _grouping(rng: np.random.Generator, n_pos: int, n_groups: int) -> np.ndarray:
    k = min(n_groups, n_pos)
    ids = np.concatenate([np.arange(k), rng.integers(0, k, size=n_pos - k)])
    return ids[rng.permutation(n_pos)]


class _LiveContext:
    """One reusable context over a mutable point buffer.

    Finite-difference probes call ``load`` with each perturbed point
    matrix; the context's positive/negative views track the buffer, the
    sample anchor is a row view, and a mean anchor is recomputed in place.
    Anchor choices stay pinned so the probe sees a function of the points.
    """

    def __init__(self, x0, n_pos, group_ids, anchor_pos, group_anchor_pos):
        self.buffer = np.array(x0, dtype=np.float64)
        positives = self.buffer[:n_pos]
        self.mean_anchor = anchor_pos is None
        anchor = np.empty(x0.shape[1]) if self.mean_anchor else positives[anchor_pos]
        self.ctx = TripletContext(
            positive_keys=np.arange(n_pos),
            positives=positives,
            group_ids=group_ids,
            negative_keys=np.arange(n_pos, x0.shape[0]),
            negatives=self.buffer[n_pos:],
            anchor=anchor,
            anchor_pos=anchor_pos,
            group_anchor_pos=group_anchor_pos,
        )

    def load(self, x) -> TripletContext:
        np.copyto(self.buffer, x)
        if self.mean_anchor:
            np.mean(self.ctx.positives, axis=0, out=self.ctx.anchor)
        return self.ctx


def _dense_grad(grads: dict[int, np.ndarray], shape) -> np.ndarray:
    out = np.zeros(shape)
    for key, vec in grads.items():
        out[key] = vec
    return out


def _context_family(loss_name, rng, fault=1.0):
    """(fn, value_fn, x0) for a context-based loss on random points."""
    dim, n_pos, n_neg, n_groups = _instance_shape(rng)
    x0 = _random_points(rng, n_pos + n_neg, dim)
    use_sample_anchor = bool(rng.integers(2))
    group_ids = _grouping(rng, n_pos, n_groups)
    anchor_pos = int(rng.integers(n_pos)) if use_sample_anchor else None
    group_anchor_pos = None
    if use_sample_anchor:
        group_anchor_pos = {
            int(g): int(rng.choice(np.flatnonzero(group_ids == g)))
            for g in np.unique(group_ids)
        }
    alpha1 = float(rng.uniform(0.2, 1.5))
    alpha2 = float(rng.uniform(0.1, min(0.8, alpha1)))  # nested inside alpha1
    live = _LiveContext(x0, n_pos, group_ids, anchor_pos, group_anchor_pos)

    if loss_name == "mean_valued_triplet_loss":
        def compute(x, with_grads):
            return mean_valued_triplet_loss(live.load(x), alpha1, with_grads=with_grads)
    elif loss_name == "icv_triplet_loss":
        def compute(x, with_grads):
            return icv_triplet_loss(live.load(x), alpha1, alpha2, with_grads=with_grads)
    else:  # gs_trs_loss
        n_classes = int(rng.integers(3, 7))
        head = ClassifierHead(
            V=rng.standard_normal((n_classes, dim)), c0=rng.standard_normal(n_classes)
        )
        labels = np.concatenate(
            [np.zeros(n_pos, dtype=np.int64), rng.integers(1, n_classes, size=n_neg)]
        )
        config = LossConfig(alpha1=alpha1, alpha2=alpha2, omega=float(rng.uniform(0.2, 0.8)))

        def compute(x, with_grads):
            out, _ = gs_trs_loss(live.load(x), head, labels, config, with_grads=with_grads)
            return out

    def fn(x):
        out = compute(x, True)
        return out.value, _dense_grad(out.grads, x.shape) * fault, out.branch_signature

    def value_fn(x):
        out = compute(x, False)
        return out.value, out.branch_signature

    return fn, value_fn, x0


def _triplet_family(rng, fault=1.0):
    dim = int(rng.integers(4, 17))
    x0 = _random_points(rng, 3, dim)
    alpha = float(rng.uniform(0.2, 1.5))

    def fn(x):
        out = triplet_loss(x[0], x[1], x[2], alpha)
        return out.value, _dense_grad(out.grads, x.shape) * fault, out.branch_signature

    def value_fn(x):
        out = triplet_loss(x[0], x[1], x[2], alpha, with_grads=False)
        return out.value, out.branch_signature

    return fn, value_fn, x0


def _softmax_family(rng, fault=1.0):
    dim, n_pos, _, _ = _instance_shape(rng)
    n_classes = int(rng.integers(3, 7))
    emb0 = _random_points(rng, n_pos, dim)
    head = ClassifierHead(
        V=rng.standard_normal((n_classes, dim)), c0=rng.standard_normal(n_classes)
    )
    labels = rng.integers(0, n_classes, size=n_pos)
    # check embedding- and head-parameter gradients in one flat vector;
    # probes write into the live arrays instead of rebuilding the head
    emb = emb0.copy()
    sizes = (emb.size, head.V.size, head.c0.size)

    def load(x):
        np.copyto(emb.reshape(-1), x[: sizes[0]])
        np.copyto(head.V.reshape(-1), x[sizes[0] : sizes[0] + sizes[1]])
        np.copyto(head.c0, x[sizes[0] + sizes[1] :])

    def fn(x):
        load(x)
        out, head_grads = softmax_cross_entropy(head, emb, labels, validate=False)
        grad = np.concatenate(
            [
                _dense_grad(out.grads, emb.shape).ravel(),
                head_grads["V"].ravel(),
                head_grads["c0"],
            ]
        )
        return out.value, grad * fault, out.branch_signature

    def value_fn(x):
        load(x)
        out, _ = softmax_cross_entropy(head, emb, labels, with_grads=False, validate=False)
        return out.value, out.branch_signature

    return fn, value_fn, np.concatenate([emb0.ravel(), head.V.ravel(), head.c0])


def _backprop_family(rng, fault=1.0):
    dim, n_pos, _, _ = _instance_shape(rng)
    d_out = int(rng.integers(4, 17))
    hidden = int(rng.integers(3, 9)) if rng.integers(2) else 0
    model = init_embedding(dim, d_out, rng, hidden=hidden, normalize=True)
    X = rng.standard_normal((n_pos, dim))
    A = rng.standard_normal((n_pos, d_out))  # fixed scalarization weights
    blocks = list(model.params().items())
    sizes = [p.size for _, p in blocks]
    x0 = np.concatenate([p.ravel() for _, p in blocks])

    def load(x):
        # probes write into the live parameter arrays
        offset = 0
        for (_, p), size in zip(blocks, sizes):
            np.copyto(p.reshape(-1), x[offset : offset + size])
            offset += size

    def fn(x):
        load(x)
        out, cache = embed_with_cache(model, X, validate=False)
        grads = backprop_embedding(model, cache, A)
        grad = np.concatenate([grads[name].ravel() for name, _ in blocks])
        return float((A * out).sum()), grad * fault, ()

    def value_fn(x):
        load(x)
        out, _ = embed_with_cache(model, X, validate=False)
        return float((A * out).sum()), ()

    return fn, value_fn, x0


_FAMILY_BUILDERS = {
    "triplet_loss": _triplet_family,
    "mean_valued_triplet_loss": lambda rng, fault=1.0: _context_family(
        "mean_valued_triplet_loss", rng, fault
    ),
    "icv_triplet_loss": lambda rng, fault=1.0: _context_family("icv_triplet_loss", rng, fault),
    "softmax_cross_entropy": _softmax_family,
    "gs_trs_loss": lambda rng, fault=1.0: _context_family("gs_trs_loss", rng, fault),
    "backprop_embedding": _backprop_family,
}


def run_gradient_suite(
    seed: int = 0,
    trials: int = 100,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    inject_fault: bool = False,
) -> list[FamilyReport]:
    """Gradient-check ``trials`` random instances of every family.

    ``inject_fault`` scales one family's analytic gradients by 1.01, which
    must make the suite fail (a self-test of the oracle's sensitivity).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    reports = []
    for family_idx, family in enumerate(GRADIENT_FAMILIES):
        rng = np.random.default_rng([seed, 0x6D1F, family_idx])
        fault = 1.01 if (inject_fault and family == "mean_valued_triplet_loss") else 1.0
        worst = 0.0
        checked = 0
        unstable = 0
        for _ in range(trials):
            fn, value_fn, x0 = _FAMILY_BUILDERS[family](rng, fault)
            report = grad_check(fn, x0, step=step, tolerance=tolerance, value_fn=value_fn)
            worst = max(worst, report.max_rel_error)
            checked += report.n_checked
            unstable += len(report.unstable)
        reports.append(
            FamilyReport(
                family=family,
                max_rel_error=worst,
                n_instances=trials,
                n_coords_checked=checked,
                n_coords_unstable=unstable,
                tolerance=tolerance,
            )
        )
    return reports
