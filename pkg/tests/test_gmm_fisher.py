import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slideagg.errors import ShapeError, ZeroNormWarning
from slideagg.gmm_fisher import (
    VAR_FLOOR,
    GmmModel,
    em_fit,
    fisher_encode,
    improved_fv,
    l2_normalize,
    power_normalize,
    responsibilities,
)

from oracles import block_relative_error, fisher_blocks_numeric, split_fisher_vector


def two_clusters(rng, n=200, d=2):
    x = np.vstack([rng.normal(-5, 0.5, (n // 2, d)), rng.normal(5, 0.5, (n // 2, d))])
    return x[rng.permutation(n)]


class TestEm:
    def test_single_component_closed_form(self, rng):
        x = rng.standard_normal((50, 3)) * [1.0, 2.0, 0.001]
        model = em_fit(x, 1)
        np.testing.assert_allclose(model.weights, [1.0])
        np.testing.assert_allclose(model.means[0], x.mean(0), rtol=1e-12)
        np.testing.assert_allclose(model.variances[0], np.maximum(x.var(0), VAR_FLOOR), rtol=1e-12)
        assert model.variances[0, 2] == VAR_FLOOR

    def test_two_clusters(self, rng):
        x = two_clusters(rng)
        model = em_fit(x, 2, seed=1)
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order], [[-5, -5], [5, 5]], atol=0.1)
        gamma = responsibilities(model, x)
        assert np.all(gamma.max(axis=1) > 0.999)

    def test_monotone_log_likelihood(self, rng):
        x = rng.standard_normal((300, 4))
        model = em_fit(x, 5, seed=2, tol=0.0, max_iters=40)
        ll = np.array(model.log_likelihood)
        assert len(ll) > 5
        assert np.all(np.diff(ll) >= -1e-10)

    def test_deterministic(self, rng):
        x = rng.standard_normal((100, 3))
        a, b = em_fit(x, 3, seed=4), em_fit(x, 3, seed=4)
        assert np.array_equal(a.means, b.means) and np.array_equal(a.variances, b.variances)

    def test_too_few_rows(self):
        with pytest.raises(Exception, match="cannot support"):
            em_fit(np.zeros((2, 2)), 3)

    def test_save_load(self, tmp_path, rng):
        model = em_fit(rng.standard_normal((40, 2)), 2)
        model.save(tmp_path / "g.sagm")
        back = GmmModel.load(tmp_path / "g.sagm")
        for f in ("weights", "means", "variances"):
            assert np.array_equal(getattr(back, f), getattr(model, f))


class TestResponsibilities:
    def test_single_component(self, rng):
        model = GmmModel(np.array([1.0]), rng.standard_normal((1, 3)), np.ones((1, 3)))
        np.testing.assert_array_equal(responsibilities(model, rng.standard_normal(3)), [1.0])

    def test_symmetric(self):
        model = GmmModel(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.ones((2, 2)))
        np.testing.assert_allclose(responsibilities(model, np.array([0.0, 3.0])), [0.5, 0.5])

    def test_at_mean(self):
        model = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [10.0, 10.0]]), np.ones((2, 2)))
        assert responsibilities(model, np.array([0.0, 0.0]))[0] > 0.999

    def test_simplex(self, rng):
        model = em_fit(rng.standard_normal((60, 3)), 4)
        gamma = responsibilities(model, rng.standard_normal((10, 3)) * 5)
        np.testing.assert_allclose(gamma.sum(1), 1.0)
        assert np.all(gamma >= 0)


class TestFisherEncode:
    def test_vanishes_at_mle(self, rng):
        x = rng.standard_normal((20, 3))
        model = em_fit(x, 1)
        fv = fisher_encode(model, x)
        assert fv.shape == (model.fv_dim,)
        np.testing.assert_allclose(fv, 0.0, atol=1e-12)

    def test_patches_at_mean_give_negative_variance_block(self):
        model = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [50.0, 50.0]]), np.array([[1.0, 4.0], [1, 1]]))
        x = np.zeros((4, 2))
        _, mu, var = split_fisher_vector(fisher_encode(model, x), 2, 2)
        np.testing.assert_allclose(mu[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(var[0], -1.0 / np.sqrt(2 * 0.5), rtol=1e-12)
        assert np.all(var[0] < 0)

    def test_average_of_single_patch_encodings(self, rng):
        model = em_fit(rng.standard_normal((60, 3)), 3)
        x = rng.standard_normal((7, 3))
        singles = np.mean([fisher_encode(model, row[None]) for row in x], axis=0)
        np.testing.assert_allclose(fisher_encode(model, x), singles, rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("k,d", [(1, 1), (1, 3), (2, 2), (2, 3)])
    def test_matches_numeric_gradient(self, k, d, rng):
        for _ in range(3):
            model = GmmModel(rng.dirichlet(np.ones(k) * 3), rng.standard_normal((k, d)), rng.uniform(0.5, 2, (k, d)))
            x = rng.standard_normal((9, d)) * 1.5
            actual = split_fisher_vector(fisher_encode(model, x), k, d)
            for a, e in zip(actual, fisher_blocks_numeric(model, x)):
                assert block_relative_error(a, e) < 1e-6

    def test_permutation_bit_exact(self, rng):
        model = em_fit(rng.standard_normal((60, 3)), 3)
        x = rng.standard_normal((9, 3))
        assert np.array_equal(improved_fv(model, x), improved_fv(model, x[rng.permutation(9)]))

    def test_dimension_check(self, rng):
        model = em_fit(rng.standard_normal((20, 3)), 2)
        with pytest.raises(ShapeError):
            fisher_encode(model, np.zeros((2, 4)))


class TestNormalization:
    def test_power(self):
        np.testing.assert_array_equal(power_normalize([4.0, -9.0, 0.0]), [2.0, -3.0, 0.0])

    def test_l2(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
        unit = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(unit), unit)

    def test_zero_vector_warns(self):
        with pytest.warns(ZeroNormWarning):
            out = l2_normalize(np.zeros(3))
        np.testing.assert_array_equal(out, 0.0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_improved_fv_has_unit_norm(self, values):
        v = np.array(values)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZeroNormWarning)
            out = l2_normalize(power_normalize(v))
        if np.any(v != 0):
            assert np.linalg.norm(out) == pytest.approx(1.0)
            assert np.array_equal(np.sign(out), np.sign(v))
