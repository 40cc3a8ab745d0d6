import numpy as np
import pytest

from gstrs.numerics import PcaReducer, l2_normalize, l2_normalize_rows, squared_distance

from helpers import scalar_squared_distance


class TestSquaredDistance:
    def test_pythagorean_triple(self):
        assert squared_distance([0.0, 0.0], [3.0, 4.0]) == 25.0

    def test_identical_points(self):
        x = np.array([1.5, -2.0, 0.25])
        assert squared_distance(x, x) == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            x = rng.standard_normal(16)
            y = rng.standard_normal(16)
            assert squared_distance(x, y) == pytest.approx(
                scalar_squared_distance(x, y), abs=1e-12
            )

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.standard_normal(5)
            y = rng.standard_normal(5)
            assert squared_distance(x, y) == squared_distance(y, x)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.standard_normal(6)
            y = rng.standard_normal(6)
            t = rng.standard_normal(6) * 10
            base = squared_distance(x, y)
            assert squared_distance(x + t, y + t) == pytest.approx(base, rel=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            squared_distance([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            squared_distance([np.nan, 0.0], [0.0, 0.0])


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(v), v)

    def test_zero_norm_is_an_error(self):
        with pytest.raises(ValueError, match="zero-norm"):
            l2_normalize([0.0, 0.0])

    def test_output_norm_is_one(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            v = rng.standard_normal(8) * rng.uniform(1e-3, 1e3)
            norm = np.linalg.norm(l2_normalize(v))
            assert abs(norm - 1.0) <= 1e-9

    def test_rows_variant_names_offending_row(self):
        X = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="row at index 1"):
            l2_normalize_rows(X)


class TestPcaReducer:
    def test_points_on_a_line(self):
        # y = 2x: first component along (1,2)/sqrt(5), second variance 0
        t = np.linspace(-2, 2, 30)
        X = np.stack([t, 2 * t], axis=1)
        pca = PcaReducer(n_components=2).fit(X)
        np.testing.assert_allclose(
            pca.components_[0], np.array([1.0, 2.0]) / np.sqrt(5), atol=1e-12
        )
        assert pca.explained_variance_[1] == pytest.approx(0.0, abs=1e-12)
        assert pca.rank_deficient_

    def test_full_rank_round_trip(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((40, 6))
        pca = PcaReducer(n_components=6).fit(X)
        Z = pca.transform(X)
        back = Z @ pca.components_ + pca.mean_
        np.testing.assert_allclose(back, X, atol=1e-8)

    def test_explained_variance_matches_svd_oracle(self):
        # independent route: singular values of the centered data matrix
        rng = np.random.default_rng(123)
        X = rng.standard_normal((50, 8)) @ np.diag(rng.uniform(0.5, 3.0, 8))
        pca = PcaReducer(n_components=8).fit(X)
        centered = X - X.mean(axis=0)
        svals = np.linalg.svd(centered, compute_uv=False)
        oracle = svals**2 / (len(X) - 1)
        np.testing.assert_allclose(pca.explained_variance_, oracle, atol=1e-8)

    def test_transform_of_mean_is_zero(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((20, 5))
        pca = PcaReducer(n_components=3).fit(X)
        np.testing.assert_allclose(
            pca.transform(X.mean(axis=0)[None, :])[0], np.zeros(3), atol=1e-12
        )

    def test_full_dimension_is_an_isometry(self):
        rng = np.random.default_rng(17)
        X = rng.standard_normal((25, 7))
        Z = PcaReducer(n_components=7).fit(X).transform(X)
        for i in range(0, 25, 5):
            for j in range(i + 1, 25, 5):
                d_x = squared_distance(X[i], X[j])
                d_z = squared_distance(Z[i], Z[j])
                assert d_z == pytest.approx(d_x, rel=1e-8)

    def test_components_are_orthonormal(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((30, 6))
        pca = PcaReducer(n_components=4).fit(X)
        gram = pca.components_ @ pca.components_.T
        np.testing.assert_allclose(gram, np.eye(4), atol=1e-8)

    def test_k_exceeding_dim_rejected(self):
        X = np.zeros((5, 3)) + np.arange(3)
        with pytest.raises(ValueError, match="exceeds input dim"):
            PcaReducer(n_components=4).fit(X)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError, match="at least 2 samples"):
            PcaReducer(n_components=1).fit(np.ones((1, 3)))

    def test_transform_dim_mismatch(self):
        rng = np.random.default_rng(1)
        pca = PcaReducer(n_components=2).fit(rng.standard_normal((10, 4)))
        with pytest.raises(ValueError, match="dimension mismatch"):
            pca.transform(rng.standard_normal((3, 5)))

    def test_sign_convention_is_reproducible(self):
        rng = np.random.default_rng(31)
        X = rng.standard_normal((40, 5))
        a = PcaReducer(n_components=5).fit(X)
        b = PcaReducer(n_components=5).fit(np.array(X))
        np.testing.assert_array_equal(a.components_, b.components_)
        for row in a.components_:
            assert row[np.argmax(np.abs(row))] > 0
