"""Link functions, divergences, entropies, and initializers."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsdnet import simplex
from fsdnet.errors import ContractError, DegenerateSeedError, DimensionError

from oracles import central_diff, rel_err, scalar_entropy, scalar_kld_i, scalar_kld_m

seed_vectors = st.lists(st.floats(-5, 5), min_size=2, max_size=8)


class TestLogSimplexLink:
    def test_uniform_from_zeros(self):
        npt.assert_allclose(simplex.link_logsimplex(np.zeros(3)), np.full(3, 1 / 3),
                            rtol=1e-15)

    def test_direct_evaluation(self):
        out = simplex.link_logsimplex(np.log([1.0, 2.0, 3.0]))
        npt.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    def test_translation_invariance(self):
        theta = np.array([0.3, -1.2, 2.0, 0.0])
        npt.assert_allclose(
            simplex.link_logsimplex(theta + 7.3), simplex.link_logsimplex(theta),
            rtol=1e-12,
        )

    @given(seed_vectors)
    @settings(max_examples=80, deadline=None)
    def test_output_is_a_distribution(self, values):
        pi = simplex.link_logsimplex(np.asarray(values))
        assert pi.min() >= 0.0
        assert abs(pi.sum() - 1.0) < 1e-9


class TestSphericalLink:
    def test_uniform_from_ones(self):
        npt.assert_allclose(simplex.link_spherical(np.ones(4)), np.full(4, 0.25),
                            rtol=1e-15)

    def test_direct_evaluation(self):
        npt.assert_allclose(simplex.link_spherical(np.array([3.0, 4.0])),
                            [0.36, 0.64], rtol=1e-15)

    def test_scale_invariance(self):
        theta = np.array([0.5, -1.5, 2.5])
        npt.assert_allclose(
            simplex.link_spherical(-2.5 * theta), simplex.link_spherical(theta),
            rtol=1e-12,
        )

    def test_zero_seed_rejected(self):
        with pytest.raises(DegenerateSeedError):
            simplex.link_spherical(np.zeros(3))

    @given(seed_vectors)
    @settings(max_examples=80, deadline=None)
    def test_output_is_a_distribution(self, values):
        theta = np.asarray(values)
        if (theta * theta).sum() == 0.0:
            return
        pi = simplex.link_spherical(theta)
        assert pi.min() >= 0.0
        assert abs(pi.sum() - 1.0) < 1e-9


class TestLinkVjp:
    def test_logsimplex_uniform_against_ones_upstream(self):
        # rows of the softmax Jacobian sum to zero
        g = simplex.link_vjp(np.zeros(5), np.ones(5), "logsimplex")
        npt.assert_allclose(g, np.zeros(5), atol=1e-15)

    def test_spherical_cotangent_orthogonal_to_seed(self):
        rng = np.random.default_rng(11)
        theta = rng.normal(size=(50, 7))
        upstream = rng.normal(size=(50, 7))
        g = simplex.link_vjp(theta, upstream, "spherical")
        dots = np.abs((g * theta).sum(axis=-1))
        assert dots.max() < 1e-10

    @pytest.mark.parametrize("mode", ["logsimplex", "spherical"])
    def test_matches_finite_differences(self, mode):
        rng = np.random.default_rng(12)
        theta = rng.normal(size=5)
        upstream = rng.normal(size=5)
        g = simplex.link_vjp(theta, upstream, mode)
        num = central_diff(lambda t: float(simplex.link(t, mode) @ upstream), theta)
        assert rel_err(g, num, floor=1e-6).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            simplex.link_vjp(np.ones(3), np.ones(4), "logsimplex")


class TestEntropy:
    def test_uniform(self):
        assert simplex.entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot(self):
        assert simplex.entropy(np.array([0.0, 1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_derived_value(self):
        p = np.array([0.25, 0.75])
        assert simplex.entropy(p) == pytest.approx(0.562335, abs=1e-6)
        assert simplex.entropy(p) == pytest.approx(scalar_entropy(p), abs=1e-12)


class TestKld:
    def test_m_zero_on_equal(self):
        x = np.log([0.2, 0.3, 0.5])
        assert simplex.kld_m(np.exp(x), x) == pytest.approx(0.0, abs=1e-12)

    def test_m_derived_value(self):
        q = np.array([0.5, 0.5])
        x = np.log([0.25, 0.75])
        assert simplex.kld_m(q, x) == pytest.approx(0.143841, abs=1e-6)
        assert simplex.kld_m(q, x) == pytest.approx(scalar_kld_m(q, x), abs=1e-12)

    def test_m_one_hot_against_uniform(self):
        q = np.array([1.0, 0.0])
        x = np.log([0.5, 0.5])
        assert simplex.kld_m(q, x) == pytest.approx(math.log(2), abs=1e-12)

    def test_i_zero_on_equal(self):
        q = np.log([0.1, 0.6, 0.3])
        assert simplex.kld_i(np.exp(q), q) == pytest.approx(0.0, abs=1e-12)

    def test_i_derived_value(self):
        x = np.array([0.25, 0.75])
        q = np.log([0.5, 0.5])
        assert simplex.kld_i(x, q) == pytest.approx(0.130812, abs=1e-6)
        assert simplex.kld_i(x, q) == pytest.approx(scalar_kld_i(x, q), abs=1e-12)

    def test_i_uniform_uniform(self):
        x = np.full(3, 1 / 3)
        assert simplex.kld_i(x, np.log(x)) == pytest.approx(0.0, abs=1e-12)

    @given(seed_vectors, seed_vectors)
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_zero_iff_equal(self, a, b):
        d = max(2, min(len(a), len(b)))
        p = simplex.link_logsimplex(np.asarray(a[:d]))
        q = simplex.link_logsimplex(np.asarray(b[:d]))
        dm = simplex.kld_m(p, np.log(q))
        assert dm > -1e-12
        if np.abs(p - q).max() < 1e-12:
            assert dm < 1e-9
        assert simplex.kld_m(p, np.log(p)) < 1e-9


class TestJsd:
    def test_identical_filters(self):
        f = np.tile([0.2, 0.8], (3, 1))
        assert simplex.jsd(f, np.full(3, 1 / 3)) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_one_hots(self):
        f = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert simplex.jsd(f, np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-9)

    def test_matches_direct_entropy_evaluation(self):
        rng = np.random.default_rng(13)
        f = simplex.link_logsimplex(rng.normal(size=(3, 4)))
        w = simplex.link_logsimplex(rng.normal(size=3))
        want = scalar_entropy(w @ f) - sum(
            wi * scalar_entropy(fi) for wi, fi in zip(w, f)
        )
        assert simplex.jsd(f, w) == pytest.approx(want, abs=1e-12)
        assert 0.0 <= simplex.jsd(f, w) <= scalar_entropy(w) + 1e-12

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            simplex.jsd(np.full((3, 2), 0.5), np.array([0.5, 0.5]))


class TestDirichletInit:
    def test_component_means_are_uniform(self):
        # flat Dirichlet: E[pi_i] = 1/D, var = (D-1) / (D^2 (D+1))
        d, n = 4, 100_000
        rng = np.random.default_rng(100)
        theta = simplex.init_dirichlet_flat(d, 1.0, rng, shape=(n,))
        pi = simplex.link_logsimplex(theta)
        sigma_mean = math.sqrt((d - 1) / (d * d * (d + 1)) / n)
        assert np.abs(pi.mean(axis=0) - 1 / d).max() < 3 * sigma_mean

    def test_gamma_lowers_mean_entropy(self):
        d, n = 5, 20_000
        rng = np.random.default_rng(101)
        theta = simplex.init_dirichlet_flat(d, 1.0, rng, shape=(n,))
        h1 = simplex.entropy(simplex.link_logsimplex(theta)).mean()
        h4 = simplex.entropy(simplex.link_logsimplex(4.0 * theta)).mean()
        assert h4 < h1

    def test_reproducible(self):
        a = simplex.init_dirichlet_flat(6, 2.0, np.random.default_rng(5))
        b = simplex.init_dirichlet_flat(6, 2.0, np.random.default_rng(5))
        npt.assert_array_equal(a, b)

    def test_preconditions(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            simplex.init_dirichlet_flat(1, 1.0, rng)
        with pytest.raises(ContractError):
            simplex.init_dirichlet_flat(3, 0.5, rng)


class TestSphereInit:
    def test_unit_norm(self):
        theta = simplex.init_sphere_uniform(7, np.random.default_rng(6), shape=(50,))
        npt.assert_allclose(np.linalg.norm(theta, axis=-1), 1.0, atol=1e-12)

    def test_component_means_are_uniform(self):
        # theta uniform on the sphere: E[theta_i^2] = 1/D, E[theta_i^4] = 3/(D(D+2))
        d, n = 4, 100_000
        rng = np.random.default_rng(102)
        theta = simplex.init_sphere_uniform(d, rng, shape=(n,))
        pi = simplex.link_spherical(theta)
        var = 3.0 / (d * (d + 2)) - 1.0 / (d * d)
        sigma_mean = math.sqrt(var / n)
        assert np.abs(pi.mean(axis=0) - 1 / d).max() < 3 * sigma_mean

    def test_reproducible(self):
        a = simplex.init_sphere_uniform(4, np.random.default_rng(7))
        b = simplex.init_sphere_uniform(4, np.random.default_rng(7))
        npt.assert_array_equal(a, b)


def test_safe_log_floor():
    out = simplex.safe_log(np.array([1.0, 0.0]))
    assert out[0] == 0.0
    assert out[1] == pytest.approx(math.log(1e-12))
