import numpy as np
import pytest
from sklearn.base import clone

from gstrs.data import SynthSpec, generate_synthetic
from gstrs.trainer import LOSS_MODES, GsTrsEmbedder


@pytest.fixture(scope="module")
def small_dataset():
    spec = SynthSpec(
        n_classes=5,
        groups_per_class=2,
        samples_per_group=8,
        raw_dim=12,
        class_separation=6.0,
        group_separation=3.0,
        noise_sigma=1.0,
        seed=0,
    )
    X, manifest = generate_synthetic(spec)
    return X, manifest.classes, manifest.groups


def small_estimator(**kwargs):
    defaults = dict(embed_dim=8, epochs=5, n_groups=2, seed=0)
    defaults.update(kwargs)
    return GsTrsEmbedder(**defaults)


class TestFit:
    def test_fitted_attributes(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator().fit(X, y)
        assert est.model_.W.shape == (8, 12)
        assert est.head_.n_classes == 5
        assert est.groups_.shape == (len(X),)
        assert len(est.history_) == 5
        assert set(est.history_[0]) == {"epoch", "L_softmax", "L_inter", "L_intra", "L_total"}

    def test_transform_returns_unit_rows(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator().fit(X, y)
        Z = est.transform(X)
        assert Z.shape == (len(X), 8)
        np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)

    def test_predict_uses_original_labels(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(epochs=20).fit(X, y)
        pred = est.predict(X)
        assert set(pred) <= set(y)
        assert (pred == y).mean() > 0.9  # separable training data

    def test_loss_decreases_on_synthetic_data(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(epochs=30).fit(X, y)
        assert est.history_[-1]["L_total"] < est.history_[0]["L_total"]

    def test_provided_groups_are_honored(self, small_dataset):
        X, y, groups = small_dataset
        est = small_estimator().fit(X, y, groups=groups)
        np.testing.assert_array_equal(est.groups_, groups)

    def test_unassigned_groups_rejected(self, small_dataset):
        X, y, _ = small_dataset
        bad = np.full(len(X), -1)
        with pytest.raises(ValueError, match="grouping"):
            small_estimator().fit(X, y, groups=bad)

    @pytest.mark.parametrize("mode", LOSS_MODES)
    def test_every_mode_trains(self, small_dataset, mode):
        X, y, _ = small_dataset
        est = small_estimator(loss_mode=mode, epochs=3).fit(X, y)
        assert np.all(np.isfinite(est.model_.W))
        row = est.history_[-1]
        if mode == "softmax":
            assert row["L_inter"] == 0.0 and row["L_intra"] == 0.0
        if mode in ("triplet", "triplet+softmax"):
            assert row["L_intra"] == 0.0

    def test_pure_triplet_mode_leaves_head_untouched(self, small_dataset):
        X, y, _ = small_dataset
        trained = small_estimator(loss_mode="triplet", epochs=5).fit(X, y)
        init_only = small_estimator(loss_mode="triplet", epochs=0).fit(X, y)
        np.testing.assert_array_equal(trained.head_.V, init_only.head_.V)
        assert not np.array_equal(trained.model_.W, init_only.model_.W)

    def test_hidden_layer_variant(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(hidden_dim=10, epochs=3).fit(X, y)
        assert est.model_.W1.shape == (10, 12)
        assert est.transform(X).shape == (len(X), 8)

    def test_frozen_centers_ablation_runs(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(frozen_centers=True, epochs=3).fit(X, y)
        assert np.all(np.isfinite(est.model_.W))

    def test_regrouping_schedule_runs(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(regroup_every_n_epochs=2, epochs=5).fit(X, y)
        assert est.groups_.shape == (len(X),)

    def test_invalid_mode(self, small_dataset):
        X, y, _ = small_dataset
        with pytest.raises(ValueError, match="loss_mode"):
            small_estimator(loss_mode="contrastive").fit(X, y)

    def test_too_few_classes_for_batch(self, small_dataset):
        X, y, _ = small_dataset
        with pytest.raises(ValueError, match="classes_per_batch"):
            small_estimator(classes_per_batch=9).fit(X, y)

    def test_unfitted_transform_rejected(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            small_estimator().transform(np.ones((2, 12)))


class TestDeterminism:
    def test_same_seed_is_bit_reproducible(self, small_dataset):
        X, y, _ = small_dataset
        a = small_estimator(epochs=8).fit(X, y)
        b = small_estimator(epochs=8).fit(X, y)
        np.testing.assert_array_equal(a.model_.W, b.model_.W)
        np.testing.assert_array_equal(a.model_.b, b.model_.b)
        np.testing.assert_array_equal(a.head_.V, b.head_.V)
        assert a.history_ == b.history_

    def test_different_seeds_differ(self, small_dataset):
        X, y, _ = small_dataset
        a = small_estimator(seed=0, epochs=3).fit(X, y)
        b = small_estimator(seed=1, epochs=3).fit(X, y)
        assert not np.array_equal(a.model_.W, b.model_.W)

    def test_zero_learning_rate_keeps_initialization(self, small_dataset):
        X, y, _ = small_dataset
        trained = small_estimator(learning_rate=0.0, epochs=5).fit(X, y)
        init_only = small_estimator(epochs=0).fit(X, y)
        np.testing.assert_array_equal(trained.model_.W, init_only.model_.W)
        np.testing.assert_array_equal(trained.head_.V, init_only.head_.V)


class TestSklearnCompat:
    def test_get_params_round_trip(self):
        est = small_estimator(alpha2=0.7)
        params = est.get_params()
        assert params["alpha2"] == 0.7
        est2 = GsTrsEmbedder(**params)
        assert est2.get_params() == params

    def test_clone(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator()
        est.fit(X, y)
        fresh = clone(est)
        assert not hasattr(fresh, "model_")
        assert fresh.get_params() == est.get_params()

    def test_normalize_off_transform_is_raw(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(normalize=False, epochs=2).fit(X, y)
        Z = est.transform(X)
        norms = np.linalg.norm(Z, axis=1)
        assert np.std(norms) > 1e-6  # not unit-normalized

    def test_normalize_off_matches_manual_affine(self, small_dataset):
        X, y, _ = small_dataset
        est = small_estimator(normalize=False, epochs=2).fit(X, y)
        Z = est.transform(X)
        np.testing.assert_allclose(Z, X @ est.model_.W.T + est.model_.b, atol=1e-12)
