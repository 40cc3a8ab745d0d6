import itertools

import numpy as np
import pytest

from gstrs.sampling import BatchSpec, build_contexts, epoch_batches, epoch_iterator, sample_batch


def labeled_dataset(n_classes=4, n_groups=2, per_group=10):
    n = n_classes * n_groups * per_group
    classes = np.repeat(np.arange(n_classes), n_groups * per_group)
    groups = np.tile(np.repeat(np.arange(n_groups), per_group), n_classes)
    return classes, groups, n


class TestSampleBatch:
    def test_structural_counts(self):
        classes, groups, _ = labeled_dataset(4, 2, 10)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=2)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(0))
        assert len(batch) == 8
        assert len(np.unique(batch.classes)) == 2
        for c in np.unique(batch.classes):
            tags = list(zip(batch.classes, batch.groups))
            per_group = {
                g: sum(1 for cc, gg in tags if cc == c and gg == g)
                for g in np.unique(batch.groups[batch.classes == c])
            }
            assert sorted(per_group.values()) == [2, 2]
        assert not batch.deficient
        assert len(set(batch.rows.tolist())) == len(batch)  # no repeats

    def test_deficient_group_duplicates_and_flags(self):
        # class 0 group 0 has a single member
        classes = np.array([0, 0, 0, 1, 1, 1, 1])
        groups = np.array([0, 1, 1, 0, 0, 1, 1])
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=2)
        rng = np.random.default_rng(1)
        seen_deficient = False
        for _ in range(20):
            batch = sample_batch(classes, groups, spec, rng)
            if (0, 0) in batch.deficient_groups:
                seen_deficient = True
                rows = batch.rows[(batch.classes == 0) & (batch.groups == 0)]
                assert rows.tolist() == [0, 0]  # the lone member, duplicated
        assert seen_deficient

    def test_class_pair_frequencies_uniform(self):
        classes, groups, _ = labeled_dataset(4, 2, 10)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=1, samples_per_group=1)
        rng = np.random.default_rng(2)
        counts = {pair: 0 for pair in itertools.combinations(range(4), 2)}
        n_draws = 10_000
        for _ in range(n_draws):
            batch = sample_batch(classes, groups, spec, rng)
            pair = tuple(sorted(np.unique(batch.classes).tolist()))
            counts[pair] += 1
        p = 1.0 / 6.0
        sigma = np.sqrt(p * (1 - p) / n_draws)
        for pair, count in counts.items():
            assert abs(count / n_draws - p) < 3 * sigma, (pair, count)

    def test_too_few_classes(self):
        classes = np.zeros(10, dtype=int)
        groups = np.zeros(10, dtype=int)
        spec = BatchSpec(classes_per_batch=2)
        with pytest.raises(ValueError, match="at least 2 classes"):
            sample_batch(classes, groups, spec, np.random.default_rng(0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BatchSpec(classes_per_batch=1)
        with pytest.raises(ValueError):
            BatchSpec(groups_per_class=0)
        with pytest.raises(ValueError):
            BatchSpec(samples_per_group=0)


class TestEpochBatches:
    def test_batch_count(self):
        classes, groups, n = labeled_dataset(4, 2, 20)  # 160 samples
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=2)
        batches = epoch_batches(classes, groups, spec, seed=0, epoch=0)
        assert n == 160
        assert len(batches) == 20  # ceil(160 / 8)

    def test_same_seed_same_epoch_identical(self):
        classes, groups, _ = labeled_dataset(4, 2, 10)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=3)
        a = epoch_batches(classes, groups, spec, seed=5, epoch=3)
        b = epoch_batches(classes, groups, spec, seed=5, epoch=3)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.rows, y.rows)
            np.testing.assert_array_equal(x.groups, y.groups)

    def test_different_epochs_reshuffle(self):
        classes, groups, _ = labeled_dataset(4, 2, 10)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=3)
        a = epoch_batches(classes, groups, spec, seed=5, epoch=0)
        b = epoch_batches(classes, groups, spec, seed=5, epoch=1)
        assert any(not np.array_equal(x.rows, y.rows) for x, y in zip(a, b))

    def test_epoch_coverage_is_high(self):
        # balanced data: the union of one epoch's draws should cover >= 95%
        # of the dataset in expectation (measured over 100 epochs)
        classes, groups, n = labeled_dataset(10, 3, 20)  # 600 samples
        spec = BatchSpec(classes_per_batch=4, groups_per_class=2, samples_per_group=4)
        coverages = []
        for epoch in range(100):
            batches = epoch_batches(classes, groups, spec, seed=0, epoch=epoch)
            seen = set()
            for b in batches:
                seen.update(b.rows.tolist())
            coverages.append(len(seen) / n)
        assert float(np.mean(coverages)) >= 0.95

    def test_batch_structure_preserved(self):
        classes, groups, _ = labeled_dataset(5, 3, 8)
        spec = BatchSpec(classes_per_batch=3, groups_per_class=2, samples_per_group=4)
        for batch in epoch_batches(classes, groups, spec, seed=1, epoch=0):
            assert len(np.unique(batch.classes)) == 3
            for c in np.unique(batch.classes):
                sub_groups = batch.groups[batch.classes == c]
                assert len(np.unique(sub_groups)) == 2
                assert len(sub_groups) == 8

    def test_iterator_spans_epochs(self):
        classes, groups, _ = labeled_dataset(4, 2, 5)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=2)
        per_epoch = len(epoch_batches(classes, groups, spec, seed=0, epoch=0))
        seen = list(epoch_iterator(classes, groups, spec, seed=0, n_epochs=3))
        assert len(seen) == 3 * per_epoch
        assert [e for e, _ in seen] == sorted(e for e, _ in seen)


class TestBuildContexts:
    def test_two_classes_two_contexts(self):
        classes, groups, _ = labeled_dataset(4, 2, 10)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=2)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(3))
        embedded = np.random.default_rng(4).standard_normal((len(batch), 5))
        contexts = build_contexts(batch, embedded)
        assert len(contexts) == 2
        for ctx in contexts:
            # negatives are exactly the other class's batch positions
            own = set(ctx.positive_keys.tolist())
            other = set(ctx.negative_keys.tolist())
            assert own | other == set(range(len(batch)))
            assert own.isdisjoint(other)

    def test_single_class_batch_rejected(self):
        from gstrs.sampling import Batch

        batch = Batch(
            rows=np.arange(4),
            classes=np.zeros(4, dtype=np.int64),
            groups=np.zeros(4, dtype=np.int64),
        )
        with pytest.raises(ValueError, match="no negatives available"):
            build_contexts(batch, np.ones((4, 3)))

    def test_mean_anchors_equal_per_class_means(self):
        classes, groups, _ = labeled_dataset(3, 2, 6)
        spec = BatchSpec(classes_per_batch=3, groups_per_class=2, samples_per_group=2)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(5))
        embedded = np.random.default_rng(6).standard_normal((len(batch), 4))
        for ctx in build_contexts(batch, embedded, anchor_mode="mean"):
            oracle = embedded[ctx.positive_keys].mean(axis=0)
            np.testing.assert_allclose(ctx.anchor, oracle, atol=1e-12)
            assert ctx.anchor_is_mean

    def test_sample_anchors_are_batch_members(self):
        classes, groups, _ = labeled_dataset(3, 2, 6)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=2, samples_per_group=3)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(7))
        embedded = np.random.default_rng(8).standard_normal((len(batch), 4))
        rng = np.random.default_rng(9)
        for ctx in build_contexts(batch, embedded, anchor_mode="sample", rng=rng):
            assert not ctx.anchor_is_mean
            np.testing.assert_array_equal(ctx.anchor, ctx.positives[ctx.anchor_pos])
            for g, pos in ctx.group_anchor_pos.items():
                assert ctx.group_ids[pos] == g

    def test_embedding_alignment_enforced(self):
        classes, groups, _ = labeled_dataset(3, 2, 6)
        spec = BatchSpec(classes_per_batch=2, groups_per_class=1, samples_per_group=2)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(10))
        with pytest.raises(ValueError, match="align"):
            build_contexts(batch, np.ones((len(batch) + 1, 3)))

    def test_negative_cap(self):
        classes, groups, _ = labeled_dataset(4, 2, 6)
        spec = BatchSpec(classes_per_batch=4, groups_per_class=1, samples_per_group=4)
        batch = sample_batch(classes, groups, spec, np.random.default_rng(11))
        embedded = np.random.default_rng(12).standard_normal((len(batch), 3))
        contexts = build_contexts(
            batch, embedded, rng=np.random.default_rng(13), negative_cap=5
        )
        assert all(ctx.negative_keys.size == 5 for ctx in contexts)
