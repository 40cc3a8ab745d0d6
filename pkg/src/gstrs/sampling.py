"""Group-sensitive batch construction.

Batches are structured as P classes x Gs groups x K samples so every batch
supports both the inter-class and the inter-group hinge terms. Two entry
points:

* :func:`sample_batch` draws one batch uniformly (classes without
  replacement, then groups, then samples) -- the simple, analyzable draw;
* :func:`epoch_batches` builds a whole epoch's worth of batches from
  per-epoch shuffled pools, so one epoch touches nearly every sample while
  each individual batch keeps the same P x Gs x K structure.

Both are pure functions of their seed material: the same (seed, epoch,
batch index) always reproduces the same batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import TripletContext

__all__ = ["BatchSpec", "Batch", "sample_batch", "epoch_batches", "epoch_iterator", "build_contexts"]


@dataclass(frozen=True)
class BatchSpec:
    """P classes per batch, Gs groups per class, K samples per group.

    ``negative_pool_per_class`` optionally caps how many other-class batch
    members a context keeps as negatives (None keeps all).
    """

    classes_per_batch: int = 4
    groups_per_class: int = 2
    samples_per_group: int = 4
    negative_pool_per_class: int | None = None

    def __post_init__(self):
        if self.classes_per_batch < 2:
            raise ValueError("classes_per_batch must be >= 2")
        if self.groups_per_class < 1:
            raise ValueError("groups_per_class must be >= 1")
        if self.samples_per_group < 1:
            raise ValueError("samples_per_group must be >= 1")
        if self.negative_pool_per_class is not None and self.negative_pool_per_class < 1:
            raise ValueError("negative_pool_per_class must be >= 1 or None")

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.groups_per_class * self.samples_per_group


@dataclass
class Batch:
    """Sampled rows with their (class, group) tags.

    ``rows`` index into the training arrays and may repeat only when a
    group had fewer than K members; such draws are listed in
    ``deficient_groups``.
    """

    rows: np.ndarray
    classes: np.ndarray
    groups: np.ndarray
    deficient_groups: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def deficient(self) -> bool:
        return bool(self.deficient_groups)


def _index_by_class_group(class_labels, group_labels):
    class_labels = np.asarray(class_labels)
    group_labels = np.asarray(group_labels)
    if class_labels.shape != group_labels.shape:
        raise ValueError("class and group labels have mismatched lengths")
    if class_labels.size == 0:
        raise ValueError("empty dataset")
    index: dict[int, dict[int, np.ndarray]] = {}
    for c in np.unique(class_labels):
        mask = class_labels == c
        groups = {}
        sub = group_labels[mask]
        positions = np.flatnonzero(mask)
        for g in np.unique(sub):
            groups[int(g)] = positions[sub == g]
        index[int(c)] = groups
    return index


def _draw_group_members(members: np.ndarray, k: int, rng: np.random.Generator):
    """K draws from one group; replacement only when the group is too small."""
    if members.size >= k:
        return rng.choice(members, size=k, replace=False), False
    extra = rng.choice(members, size=k - members.size, replace=True)
    return np.concatenate([members, extra]), True


def sample_batch(class_labels, group_labels, spec: BatchSpec, rng: np.random.Generator) -> Batch:
    """One uniform batch draw: P classes, then Gs groups each, then K samples.

    Classes and groups are drawn without replacement; a group smaller than
    K is topped up with replacement and flagged deficient.
    """
    index = _index_by_class_group(class_labels, group_labels)
    all_classes = np.array(sorted(index.keys()))
    if all_classes.size < spec.classes_per_batch:
        raise ValueError(
            f"need at least {spec.classes_per_batch} classes, got {all_classes.size}"
        )
    chosen_classes = rng.choice(all_classes, size=spec.classes_per_batch, replace=False)
    rows, classes, groups = [], [], []
    deficient = []
    for c in chosen_classes:
        c = int(c)
        group_ids = np.array(sorted(index[c].keys()))
        take = min(spec.groups_per_class, group_ids.size)
        chosen_groups = rng.choice(group_ids, size=take, replace=False)
        for g in chosen_groups:
            g = int(g)
            drawn, was_deficient = _draw_group_members(index[c][g], spec.samples_per_group, rng)
            if was_deficient:
                deficient.append((c, g))
            rows.extend(int(r) for r in drawn)
            classes.extend([c] * len(drawn))
            groups.extend([g] * len(drawn))
    return Batch(
        rows=np.array(rows, dtype=np.int64),
        classes=np.array(classes, dtype=np.int64),
        groups=np.array(groups, dtype=np.int64),
        deficient_groups=deficient,
    )


def epoch_batches(class_labels, group_labels, spec: BatchSpec, seed: int, epoch: int) -> list[Batch]:
    """All batches of one epoch, ceil(n / (P*Gs*K)) of them.

    Classes, the group cycle of each class, and the member queue of each
    group are shuffled per epoch and consumed round-robin, so the epoch's
    union of samples approaches full coverage on balanced data while every
    batch keeps the P x Gs x K shape.
    """
    index = _index_by_class_group(class_labels, group_labels)
    all_classes = sorted(index.keys())
    if len(all_classes) < spec.classes_per_batch:
        raise ValueError(
            f"need at least {spec.classes_per_batch} classes, got {len(all_classes)}"
        )
    rng = np.random.default_rng([seed, 0x5A11, epoch])
    n = np.asarray(class_labels).size
    n_batches = -(-n // spec.batch_size)

    # per-epoch cyclic group order per class: consecutive windows are
    # distinct and every group's draw count stays within +-1 of even
    group_orders = {
        c: [sorted(index[c].keys())[i] for i in rng.permutation(len(index[c]))]
        for c in all_classes
    }
    group_ptr = {c: 0 for c in all_classes}
    member_queues = {(c, g): [] for c in all_classes for g in index[c]}
    appearances = {c: 0 for c in all_classes}

    def draw_classes() -> list[int]:
        # least-used first with a fresh random tie order: appearance counts
        # stay within +-1 of even across the epoch
        priority = rng.permutation(len(all_classes))
        ranked = sorted(
            range(len(all_classes)), key=lambda i: (appearances[all_classes[i]], priority[i])
        )
        chosen = [all_classes[i] for i in ranked[: spec.classes_per_batch]]
        for c in chosen:
            appearances[c] += 1
        return chosen

    def draw_groups(c: int) -> list[int]:
        order = group_orders[c]
        want = min(spec.groups_per_class, len(order))
        ptr = group_ptr[c]
        chosen = [order[(ptr + i) % len(order)] for i in range(want)]
        group_ptr[c] = (ptr + want) % len(order)
        return chosen

    def draw_members(c: int, g: int) -> tuple[list[int], bool]:
        members = index[c][g]
        k = spec.samples_per_group
        if members.size < k:
            drawn, _ = _draw_group_members(members, k, rng)
            return [int(r) for r in drawn], True
        out: list[int] = []
        taken = set()
        skipped: list[int] = []
        queue = member_queues[(c, g)]
        while len(out) < k:
            if not queue:
                queue[:] = [int(members[i]) for i in rng.permutation(members.size)]
            m = queue.pop()
            if m in taken:
                skipped.append(m)  # keep for a later draw, not lost this epoch
                continue
            out.append(m)
            taken.add(m)
        queue[:0] = skipped
        return out, False

    batches = []
    for _ in range(n_batches):
        rows, classes, groups = [], [], []
        deficient = []
        for c in draw_classes():
            for g in draw_groups(c):
                drawn, was_deficient = draw_members(c, g)
                if was_deficient:
                    deficient.append((c, g))
                rows.extend(drawn)
                classes.extend([c] * len(drawn))
                groups.extend([g] * len(drawn))
        batches.append(
            Batch(
                rows=np.array(rows, dtype=np.int64),
                classes=np.array(classes, dtype=np.int64),
                groups=np.array(groups, dtype=np.int64),
                deficient_groups=deficient,
            )
        )
    return batches


def epoch_iterator(class_labels, group_labels, spec: BatchSpec, seed: int, n_epochs: int):
    """Yield (epoch, Batch) across epochs, reshuffling per epoch."""
    for epoch in range(n_epochs):
        for batch in epoch_batches(class_labels, group_labels, spec, seed, epoch):
            yield epoch, batch


def build_contexts(
    batch: Batch,
    embedded: np.ndarray,
    anchor_mode: str = "mean",
    rng: np.random.Generator | None = None,
    negative_cap: int | None = None,
) -> list[TripletContext]:
    """One triplet context per class in the batch.

    ``embedded`` rows align with ``batch.rows``. Context keys are batch
    positions (unique even when a deficient group duplicated a sample), so
    gradients scatter back onto batch rows unambiguously. Negatives are all
    batch members of other classes, optionally capped.
    """
    embedded = np.asarray(embedded, dtype=np.float64)
    if embedded.shape[0] != len(batch):
        raise ValueError("embedded rows must align with batch rows")
    present = np.unique(batch.classes)
    if present.size < 2:
        raise ValueError("no negatives available: batch contains a single class")
    contexts = []
    for c in present:
        pos = np.flatnonzero(batch.classes == c)
        neg = np.flatnonzero(batch.classes != c)
        if pos.size == 0:
            continue
        if negative_cap is not None and neg.size > negative_cap:
            if rng is None:
                raise ValueError("negative_cap requires rng")
            neg = np.sort(rng.choice(neg, size=negative_cap, replace=False))
        contexts.append(
            TripletContext.build(
                positive_keys=pos,
                positives=embedded[pos],
                negative_keys=neg,
                negatives=embedded[neg],
                group_ids=batch.groups[pos],
                anchor_mode=anchor_mode,
                rng=rng,
            )
        )
    return contexts
