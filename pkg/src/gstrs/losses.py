"""Loss functions with analytic gradients, plus a finite-difference checker.

The loss family, in increasing structure:

* plain triplet hinge on one (anchor, positive, negative) unit;
* mean-valued triplet loss: the anchor is the mean of all positives and the
  negative is the single hardest one; gradients chain through the mean, so
  every positive receives a share of each active term;
* intra-class-variance (ICV) triplet loss: the mean-valued inter-class part
  plus per-group hinge terms that pull group members toward their group
  center and push the nearest cross-group sample away;
* the fused objective: omega * softmax cross-entropy + (1 - omega) * ICV.

Hinge activity and hardest-negative identity are discrete decisions; every
loss reports them in ``branch_signature`` so the gradient checker can flag
coordinates whose finite-difference probe crosses a kink.

Gradient accumulation within one context always runs in ascending sample
key order, which makes results bit-reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_feature_matrix, as_vector, check_labels, check_same_dim
from .model import ClassifierHead

__all__ = [
    "LossConfig",
    "LossOutput",
    "TripletContext",
    "GradCheckReport",
    "triplet_loss",
    "mean_anchor",
    "hardest_negative",
    "mean_valued_triplet_loss",
    "icv_triplet_loss",
    "softmax_cross_entropy",
    "gs_trs_loss",
    "grad_check",
]


@dataclass(frozen=True)
class LossConfig:
    """Margins and fusion weight.

    alpha   -- margin of the plain triplet hinge.
    alpha1  -- inter-class margin of the ICV loss.
    alpha2  -- inter-group (within-class) margin of the ICV loss.
    omega   -- softmax weight in the fused objective, in [0, 1].

    Groups are nested inside classes, so alpha2 is expected not to exceed
    alpha1; a larger alpha2 is allowed but warned about.
    """

    alpha: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 0.3
    omega: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.omega <= 1.0):
            raise ValueError("omega must be in [0, 1]")
        if self.alpha2 > self.alpha1:
            warnings.warn(
                f"alpha2={self.alpha2} > alpha1={self.alpha1}: the within-class margin "
                "normally sits inside the inter-class margin"
            )


@dataclass
class LossOutput:
    """Value, per-sample gradients, and the discrete decisions taken.

    ``grads`` maps sample key -> gradient vector; keys absent from the map
    received exactly zero gradient. ``parts`` carries named sub-values
    (e.g. inter/intra) where the loss is a sum of components.
    """

    value: float
    grads: dict[int, np.ndarray]
    active_terms: int
    branch_signature: tuple = ()
    parts: dict[str, float] = field(default_factory=dict)


def mean_anchor(positives, indices=None) -> np.ndarray:
    """Arithmetic mean of the positives.

    With ``indices`` given, rows are summed in ascending index order, making
    the result bit-identical under any permutation of the input rows.
    """
    positives = as_feature_matrix(positives, "positives")
    if indices is not None:
        indices = np.asarray(indices)
        if indices.shape[0] != positives.shape[0]:
            raise ValueError("indices and positives have mismatched lengths")
        positives = positives[np.argsort(indices, kind="stable")]
    return positives.mean(axis=0)


def hardest_negative(anchor, negatives, indices=None) -> tuple[int, np.ndarray]:
    """Negative closest to the anchor; ties go to the lowest index.

    Returns (index, vector) where the index refers to ``indices`` when
    given, else the row position.
    """
    anchor = as_vector(anchor, "anchor")
    negatives = as_feature_matrix(negatives, "negatives")
    check_same_dim(anchor, negatives, "anchor", "negatives")
    diff = negatives - anchor
    d = np.einsum("ij,ij->i", diff, diff)
    if indices is None:
        pos = int(np.argmin(d))  # first minimum = lowest position
        return pos, negatives[pos]
    indices = np.asarray(indices)
    tied = np.flatnonzero(d == d.min())
    pos = int(tied[np.argmin(indices[tied])])
    return int(indices[pos]), negatives[pos]


def triplet_loss(anchor, positive, negative, alpha: float, *, keys=(0, 1, 2), with_grads=True) -> LossOutput:
    """Hinge 0.5 * max(|a-p|^2 + alpha - |a-n|^2, 0) on one triplet unit.

    Active-case gradients: d/da = n - p, d/dp = p - a, d/dn = a - n.
    ``keys`` names the three samples in the gradient map; repeated keys
    accumulate (e.g. anchor == positive).
    """
    a = as_vector(anchor, "anchor")
    p = as_vector(positive, "positive")
    n = as_vector(negative, "negative")
    check_same_dim(a, p, "anchor", "positive")
    check_same_dim(a, n, "anchor", "negative")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    ap = a - p
    an = a - n
    slack = float(ap @ ap) + alpha - float(an @ an)
    active = slack > 0.0
    value = 0.5 * slack if active else 0.0
    grads: dict[int, np.ndarray] = {}
    if with_grads and active:
        for key in sorted(set(keys)):
            total = np.zeros_like(a)
            for k, g in zip(keys, (n - p, p - a, a - n)):
                if k == key:
                    total = total + g
            grads[key] = total
    return LossOutput(value=value, grads=grads, active_terms=int(active), branch_signature=(active,))


@dataclass
class TripletContext:
    """One class's positives (with group structure) against a negative pool.

    ``positive_keys``/``negative_keys`` are the caller's unique sample keys
    in ascending order; gradients come back keyed by them. The anchor is
    either the positives' mean (``anchor_pos is None``) or a designated
    positive sample; group anchors follow the same convention via
    ``group_anchor_pos``.
    """

    positive_keys: np.ndarray
    positives: np.ndarray
    group_ids: np.ndarray
    negative_keys: np.ndarray
    negatives: np.ndarray
    anchor: np.ndarray
    anchor_pos: int | None = None
    group_anchor_pos: dict[int, int] | None = None

    @property
    def anchor_is_mean(self) -> bool:
        return self.anchor_pos is None

    @classmethod
    def build(
        cls,
        positive_keys,
        positives,
        negative_keys,
        negatives,
        group_ids=None,
        anchor_mode: str = "mean",
        rng: np.random.Generator | None = None,
    ) -> "TripletContext":
        """Assemble a context; sorts by key and computes the anchors.

        ``anchor_mode`` is "mean" (anchors are computed means) or "sample"
        (anchor and group anchors are uniformly drawn members, the
        random-anchor baseline). "sample" requires ``rng``.
        """
        positives = as_feature_matrix(positives, "positives")
        negatives = as_feature_matrix(negatives, "negatives")
        check_same_dim(positives, negatives, "positives", "negatives")
        positive_keys = np.asarray(positive_keys, dtype=np.int64)
        negative_keys = np.asarray(negative_keys, dtype=np.int64)
        if positive_keys.shape[0] != positives.shape[0]:
            raise ValueError("positive_keys and positives have mismatched lengths")
        if negative_keys.shape[0] != negatives.shape[0]:
            raise ValueError("negative_keys and negatives have mismatched lengths")
        if group_ids is None:
            group_ids = np.zeros(positives.shape[0], dtype=np.int64)
        else:
            group_ids = np.asarray(group_ids, dtype=np.int64)
            if group_ids.shape[0] != positives.shape[0]:
                raise ValueError("group_ids and positives have mismatched lengths")

        order = np.argsort(positive_keys, kind="stable")
        positive_keys = positive_keys[order]
        positives = positives[order]
        group_ids = group_ids[order]
        norder = np.argsort(negative_keys, kind="stable")
        negative_keys = negative_keys[norder]
        negatives = negatives[norder]

        if anchor_mode == "mean":
            anchor = positives.mean(axis=0)
            anchor_pos = None
            group_anchor_pos = None
        elif anchor_mode == "sample":
            if rng is None:
                raise ValueError("anchor_mode='sample' requires rng")
            anchor_pos = int(rng.integers(positives.shape[0]))
            anchor = positives[anchor_pos]
            group_anchor_pos = {}
            for g in np.unique(group_ids):
                members = np.flatnonzero(group_ids == g)
                group_anchor_pos[int(g)] = int(members[rng.integers(members.size)])
        else:
            raise ValueError(f"unknown anchor_mode {anchor_mode!r}")
        return cls(
            positive_keys=positive_keys,
            positives=positives,
            group_ids=group_ids,
            negative_keys=negative_keys,
            negatives=negatives,
            anchor=anchor,
            anchor_pos=anchor_pos,
            group_anchor_pos=group_anchor_pos,
        )

    def validate(self, tol: float = 1e-12) -> None:
        """Check the structural invariants (used by tests and debug paths)."""
        if self.positives.shape[0] < 1 or self.negatives.shape[0] < 1:
            raise ValueError("need at least one positive and one negative")
        if np.any(np.diff(self.positive_keys) <= 0) or np.any(np.diff(self.negative_keys) <= 0):
            raise ValueError("keys must be strictly ascending")
        if np.intersect1d(self.positive_keys, self.negative_keys).size:
            raise ValueError("positive and negative keys overlap")
        if self.anchor_pos is None:
            if not np.allclose(self.anchor, self.positives.mean(axis=0), atol=tol, rtol=0):
                raise ValueError("anchor is not the mean of the positives")
        else:
            if not np.array_equal(self.anchor, self.positives[self.anchor_pos]):
                raise ValueError("anchor does not match the designated positive")

    def group_center(self, g: int) -> np.ndarray:
        members = self.group_ids == g
        if not members.any():
            raise ValueError(f"group {g} has no members in this context")
        if self.group_anchor_pos is not None:
            return self.positives[self.group_anchor_pos[int(g)]]
        return self.positives[members].mean(axis=0)

    def group_index(self):
        """(group values, inverse index, one-hot mask, counts), memoized.

        Group membership is fixed for the context's lifetime, so this is
        computed once even when the float payload is updated in place (as
        the finite-difference harness does).
        """
        cached = getattr(self, "_group_index", None)
        if cached is None:
            group_values, gidx = np.unique(self.group_ids, return_inverse=True)
            onehot = gidx == np.arange(group_values.size)[:, None]
            counts = onehot.sum(axis=1)
            cached = (group_values, gidx, onehot, counts)
            self._group_index = cached
        return cached


def _hinge_star(members, center, distractor, margin, mode, anchor_pos, with_grads):
    """Shared kernel: hinge terms of every member against one center and one
    distractor.

    mode "mean": center is the members' mean; active terms propagate a
    1/N chain share onto every member (the through-the-mean derivative).
    mode "frozen": center treated as a constant (ablation).
    mode "sample": center is members[anchor_pos]; its own term is skipped
    and the whole counter-gradient lands on the anchor.

    Returns (value, active_mask, grad_members, grad_distractor); the mask
    doubles as the hinge-activity fingerprint for branch signatures.
    """
    diffs = members - center
    dists = np.einsum("ij,ij->i", diffs, diffs)
    dvec = distractor - center
    slack = dists + (margin - float(dvec @ dvec))
    active = slack > 0.0
    if mode == "sample":
        active[anchor_pos] = False
    n_active = int(np.count_nonzero(active))
    if n_active == 0:
        return 0.0, active, None, None
    value = 0.5 * float(slack[active].sum())
    if not with_grads:
        return value, active, None, None
    grad_members = np.zeros_like(members)
    grad_members[active] += diffs[active]  # direct term x_i - c
    counter = n_active * distractor - members[active].sum(axis=0)  # sum of (n - x_i)
    if mode == "mean":
        grad_members += counter / members.shape[0]
    elif mode == "sample":
        grad_members[anchor_pos] += counter
    grad_distractor = n_active * (center - distractor)
    return value, active, grad_members, grad_distractor


def _accumulate(grad_map: dict[int, np.ndarray], keys, grads) -> None:
    for key, g in zip(keys, grads):
        k = int(key)
        if k in grad_map:
            grad_map[k] = grad_map[k] + g
        else:
            grad_map[k] = np.array(g, dtype=np.float64)


def mean_valued_triplet_loss(
    ctx: TripletContext, alpha: float, *, frozen_centers=False, with_grads=True
) -> LossOutput:
    """Sum of per-positive hinges against the anchor, with the single
    hardest negative.

    With a mean anchor, active-term gradients follow the through-the-mean
    chain rule: the term's own positive gets (x_i - c) + (n - x_i)/N, every
    other positive gets (n - x_i)/N, and the hardest negative accumulates
    (c - n) per active term. ``frozen_centers`` drops the chain (treats the
    anchor as a constant). With a sample anchor the counter-gradient lands
    on the anchor instead.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if ctx.positives.shape[0] < 1 or ctx.negatives.shape[0] < 1:
        raise ValueError("need at least one positive and one negative")
    c = ctx.anchor
    # hardest negative; first minimum = lowest key (keys are ascending)
    ndiff = ctx.negatives - c
    star_pos = int(np.argmin(np.einsum("ij,ij->i", ndiff, ndiff)))
    nstar = ctx.negatives[star_pos]
    nstar_key = int(ctx.negative_keys[star_pos])
    if ctx.anchor_pos is not None:
        mode = "sample"
    elif frozen_centers:
        mode = "frozen"
    else:
        mode = "mean"
    value, active, gm, gd = _hinge_star(
        ctx.positives, c, nstar, alpha, mode, ctx.anchor_pos, with_grads
    )
    grads: dict[int, np.ndarray] = {}
    if gm is not None:
        _accumulate(grads, ctx.positive_keys, gm)
        _accumulate(grads, [nstar_key], [gd])
    return LossOutput(
        value=value,
        grads=grads,
        active_terms=int(np.count_nonzero(active)),
        branch_signature=(nstar_key, active.tobytes()),
    )


def icv_triplet_loss(
    ctx: TripletContext, alpha1: float, alpha2: float, *, frozen_centers=False, with_grads=True
) -> LossOutput:
    """Inter-class mean-valued loss plus per-group intra-class hinges.

    For each group g, members are pulled toward the group center while the
    same-class sample outside g that sits closest to that center (the
    cross-group distractor, mirroring the hardest-negative rule) is pushed
    past margin alpha2. A class with a single group contributes no intra
    terms. Gradients chain through group centers exactly, unless
    ``frozen_centers``.
    """
    if alpha2 < 0:
        raise ValueError("alpha2 must be >= 0")
    inter = mean_valued_triplet_loss(
        ctx, alpha1, frozen_centers=frozen_centers, with_grads=with_grads
    )
    positives = ctx.positives
    group_values, gidx, onehot, counts = ctx.group_index()
    n_groups = group_values.size
    if n_groups == 1:
        # single group: no cross-group sample exists, intra part is empty
        return LossOutput(
            value=inter.value,
            grads=inter.grads,
            active_terms=inter.active_terms,
            branch_signature=(inter.branch_signature, ()),
            parts={"inter": inter.value, "intra": 0.0},
        )

    sample_mode = ctx.group_anchor_pos is not None
    if sample_mode:
        anchor_rows = np.array([ctx.group_anchor_pos[int(v)] for v in group_values])
        centers = positives[anchor_rows]
    else:
        centers = (onehot @ positives) / counts[:, None]
    diffs = positives - centers[gidx]
    dists = np.einsum("ij,ij->i", diffs, diffs)
    # exact cross distances group-center -> every positive; own members masked
    cross = centers[:, None, :] - positives[None, :, :]
    D = np.einsum("gnd,gnd->gn", cross, cross)
    D[onehot] = np.inf
    j_rows = np.argmin(D, axis=1)  # ascending keys: first min = lowest key
    slack = dists + alpha2 - D[np.arange(n_groups), j_rows][gidx]
    active = slack > 0.0
    if sample_mode:
        active[anchor_rows] = False
    intra_active = int(np.count_nonzero(active))
    intra_value = 0.5 * float(slack[active].sum()) if intra_active else 0.0
    j_keys = tuple(int(ctx.positive_keys[j]) for j in j_rows)
    signature = (inter.branch_signature, j_keys, active.tobytes())

    grads = dict(inter.grads)
    if with_grads and intra_active:
        gm = np.zeros_like(positives)
        gm[active] += diffs[active]  # direct term x_i - c_g
        per_group_active = np.bincount(gidx[active], minlength=n_groups).astype(np.float64)
        active_sums = onehot[:, active] @ positives[active]
        counter = per_group_active[:, None] * positives[j_rows] - active_sums  # sum of (x_j - x_i)
        if sample_mode:
            gm[anchor_rows] += counter
        elif not frozen_centers:
            gm += (counter / counts[:, None])[gidx]
        for g in range(n_groups):  # distractors may repeat across groups
            gm[j_rows[g]] += per_group_active[g] * (centers[g] - positives[j_rows[g]])
        _accumulate(grads, ctx.positive_keys, gm)
    return LossOutput(
        value=inter.value + intra_value,
        grads=grads,
        active_terms=inter.active_terms + intra_active,
        branch_signature=signature,
        parts={"inter": inter.value, "intra": intra_value},
    )


def softmax_cross_entropy(
    head: ClassifierHead, embedded, labels, keys=None, *, with_grads=True, validate=True
) -> tuple[LossOutput, dict[str, np.ndarray] | None]:
    """Mean negative log softmax probability of the true class.

    Numerically stabilized by max-logit subtraction. Returns the loss
    (gradients with respect to the embedded features, keyed by ``keys``)
    and the head parameter gradients {"V": dV, "c0": dc0}.
    ``validate=False`` skips input checking for callers that already did.
    """
    if validate:
        embedded = as_feature_matrix(embedded, "embedded")
        labels = check_labels(labels, head.n_classes)
        if labels.shape[0] != embedded.shape[0]:
            raise ValueError("labels and embedded have mismatched lengths")
    n = embedded.shape[0]
    if keys is None:
        keys = np.arange(n)
    logits = head.logits(embedded)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    value = float(-log_p.mean())
    grads: dict[int, np.ndarray] = {}
    head_grads = None
    if with_grads:
        probs = np.exp(shifted - log_z[:, None])
        dlogits = probs
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        demb = dlogits @ head.V
        order = np.argsort(np.asarray(keys), kind="stable")
        for i in order:
            grads[int(keys[i])] = demb[i]
        head_grads = {"V": dlogits.T @ embedded, "c0": dlogits.sum(axis=0)}
    return (
        LossOutput(value=value, grads=grads, active_terms=0, branch_signature=()),
        head_grads,
    )


def gs_trs_loss(
    ctx: TripletContext,
    head: ClassifierHead,
    labels,
    config: LossConfig,
    *,
    frozen_centers=False,
    with_grads=True,
) -> tuple[LossOutput, dict[str, np.ndarray] | None]:
    """Fused objective: omega * softmax + (1 - omega) * ICV triplet.

    ``labels`` aligns with the stacked [positives; negatives] rows of the
    context. At omega exactly 0 or 1 the unused side is skipped entirely,
    so the reductions to the pure losses are exact.
    """
    omega = config.omega
    parts: dict[str, float] = {}
    grads: dict[int, np.ndarray] = {}
    head_grads = None
    value = 0.0
    active = 0
    signature: tuple = ()
    if omega > 0.0:
        keys = np.concatenate([ctx.positive_keys, ctx.negative_keys]) if with_grads else None
        stacked = np.vstack([ctx.positives, ctx.negatives])
        labels = check_labels(labels, head.n_classes)
        if labels.shape[0] != stacked.shape[0]:
            raise ValueError("labels must align with [positives; negatives]")
        sm, head_grads = softmax_cross_entropy(
            head, stacked, labels, keys, with_grads=with_grads, validate=False
        )
        value += omega * sm.value
        parts["softmax"] = sm.value
        if with_grads:
            for k, g in sm.grads.items():
                grads[k] = omega * g
            head_grads = {name: omega * g for name, g in head_grads.items()}
    if omega < 1.0:
        icv = icv_triplet_loss(
            ctx, config.alpha1, config.alpha2, frozen_centers=frozen_centers, with_grads=with_grads
        )
        value += (1.0 - omega) * icv.value
        parts.update(icv.parts)
        active = icv.active_terms
        signature = icv.branch_signature
        if with_grads:
            w = 1.0 - omega
            for k, g in sorted(icv.grads.items()):
                if k in grads:
                    grads[k] = grads[k] + w * g
                else:
                    grads[k] = w * g
    return (
        LossOutput(
            value=value,
            grads=grads,
            active_terms=active,
            branch_signature=signature,
            parts=parts,
        ),
        head_grads,
    )


@dataclass
class GradCheckReport:
    """Outcome of a central finite-difference sweep."""

    max_rel_error: float
    worst: list[tuple[int, float]]  # (flat coordinate, relative error), descending
    unstable: list[int]  # coordinates excluded: a branch flipped within +-step
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn, x0, step: float = 1e-5, tolerance: float = 1e-5, value_fn=None, top_k: int = 5) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    ``fn(x) -> (value, grad, branch_signature)`` supplies the analytic
    side once at ``x0``. Each coordinate is probed at x +- step using
    ``value_fn(x) -> (value, branch_signature)`` (defaults to ``fn``
    with the gradient discarded). Coordinates where either probe lands on
    a different branch (a hinge flipped, the hardest negative changed)
    are flagged unstable and excluded from the error statistics.

    Relative error is |analytic - fd| / max(|analytic|, |fd|, 1), i.e.
    floored at unit scale so near-zero coordinates are judged absolutely.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    x0 = np.array(x0, dtype=np.float64)
    _, grad, sig0 = fn(x0)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x0.shape:
        raise ValueError(f"gradient shape {grad.shape} != point shape {x0.shape}")
    if value_fn is None:
        def value_fn(x, _fn=fn):
            v, _, sig = _fn(x)
            return v, sig
    x = x0.copy()
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    errors = np.full(flat.shape[0], np.nan)
    unstable: list[int] = []
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + step
        v_plus, sig_plus = value_fn(x)
        flat[i] = orig - step
        v_minus, sig_minus = value_fn(x)
        flat[i] = orig
        if sig_plus != sig0 or sig_minus != sig0:
            unstable.append(i)
            continue
        fd = (v_plus - v_minus) / (2.0 * step)
        errors[i] = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1.0)
    checked = ~np.isnan(errors)
    n_checked = int(np.count_nonzero(checked))
    if n_checked == 0:
        max_err = 0.0
        worst = []
    else:
        max_err = float(np.nanmax(errors))
        order = np.argsort(np.where(checked, errors, -1.0))[::-1][:top_k]
        worst = [(int(i), float(errors[i])) for i in order if checked[i]]
    return GradCheckReport(
        max_rel_error=max_err,
        worst=worst,
        unstable=unstable,
        n_checked=n_checked,
        tolerance=tolerance,
    )
