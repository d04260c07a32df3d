import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdsem.errors import NotPositiveDefinite
from sdsem.lattice import (
    AdjacencyMatrix,
    GmrfSpec,
    JointGmrf,
    build_joint_precision,
    check_positive_definite,
    conditional_correlation,
    constant_mean_design,
    is_diagonally_dominant,
    sample_gmrf,
)


def scalar_spec(n_sites, f_tilde, cond_var=1.0, mean=0.0):
    return GmrfSpec.from_reparam(
        [[cond_var]], [[f_tilde]],
        constant_mean_design(n_sites, 1), [mean])


def pair_adjacency():
    return AdjacencyMatrix.from_edges([(0, 1)], 2)


class TestAdjacency:
    def test_grid_counts(self):
        w = AdjacencyMatrix.grid(3, 3)
        assert w.n_sites == 9
        # corner, edge and interior sites of a rook lattice
        assert w.entries.sum(axis=1).tolist() == [2, 3, 2, 3, 4, 3, 2, 3, 2]

    def test_rejects_asymmetry(self):
        w = np.zeros((2, 2), dtype=int)
        w[0, 1] = 1
        with pytest.raises(ValueError):
            AdjacencyMatrix(w)

    def test_rejects_isolated_unless_flagged(self):
        w = np.zeros((3, 3), dtype=int)
        w[0, 1] = w[1, 0] = 1
        with pytest.raises(ValueError):
            AdjacencyMatrix(w)
        AdjacencyMatrix(w, allow_isolated=True)

    def test_rejects_nonbinary_and_diagonal(self):
        with pytest.raises(ValueError):
            AdjacencyMatrix(np.array([[0, 2], [2, 0]]))
        with pytest.raises(ValueError):
            AdjacencyMatrix(np.array([[1, 1], [1, 0]]))


class TestJointPrecision:
    def test_no_interaction_is_independent_sites(self):
        # Ft = 0 must yield precision I_N kron T^{-1} exactly
        t = np.array([[2.0, 0.5], [0.5, 1.0]])
        spec = GmrfSpec.from_reparam(t, np.zeros((2, 2)),
                                     constant_mean_design(4, 2), np.zeros(2))
        w = AdjacencyMatrix.grid(2, 2)
        g = build_joint_precision(w, spec)
        expected = np.kron(np.eye(4), np.linalg.inv(t))
        np.testing.assert_allclose(g.dense_precision(), expected, atol=1e-12)

    def test_single_site(self):
        w = AdjacencyMatrix(np.zeros((1, 1), dtype=int), allow_isolated=True)
        g = build_joint_precision(w, scalar_spec(1, 0.3))
        np.testing.assert_allclose(g.dense_precision(), [[1.0]], atol=1e-12)

    def test_two_site_closed_form(self):
        g = build_joint_precision(pair_adjacency(), scalar_spec(2, 0.2))
        np.testing.assert_allclose(g.dense_precision(),
                                   [[1.0, 0.2], [0.2, 1.0]], atol=1e-12)
        cov = np.linalg.inv(g.dense_precision())
        expected = (1.0 / 0.96) * np.array([[1.0, -0.2], [-0.2, 1.0]])
        np.testing.assert_allclose(cov, expected, atol=1e-10)

    def test_invalid_coefficient_raises(self):
        with pytest.raises(NotPositiveDefinite):
            build_joint_precision(pair_adjacency(), scalar_spec(2, 1.5))

    def test_sparsity_pattern_follows_adjacency(self):
        w = AdjacencyMatrix.grid(2, 3)
        spec = scalar_spec(6, 0.15)
        g = build_joint_precision(w, spec)
        q = g.dense_precision()
        for i in range(6):
            for u in range(6):
                if i != u and w.entries[i, u] == 0:
                    assert q[i, u] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-0.45, 0.45), st.integers(0, 10_000))
    def test_symmetry_random_specs(self, f_tilde, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        entries = np.triu((rng.random((n, n)) < 0.6).astype(int), 1)
        w = AdjacencyMatrix(entries + entries.T, allow_isolated=True)
        spec = scalar_spec(n, f_tilde)
        try:
            g = build_joint_precision(w, spec)
        except NotPositiveDefinite:
            return
        q = g.dense_precision()
        np.testing.assert_allclose(q, q.T, atol=0)


class TestPositiveDefinite:
    def test_identity_true(self):
        g = JointGmrf(np.zeros(2), __import__("scipy.sparse", fromlist=["s"]).eye(2).tocsr())
        assert check_positive_definite(g)

    def test_indefinite_false(self):
        import scipy.sparse as sp

        g = JointGmrf(np.zeros(2), sp.csr_matrix(np.array([[1.0, 1.5], [1.5, 1.0]])))
        assert not check_positive_definite(g)

    def test_zero_coef_always_pd(self):
        for t in ([[0.3]], [[2.0, -0.4], [-0.4, 1.1]]):
            t = np.asarray(t)
            spec = GmrfSpec.from_reparam(t, np.zeros_like(t),
                                         constant_mean_design(5, t.shape[0]),
                                         np.zeros(t.shape[0]))
            w = AdjacencyMatrix.grid(1, 5)
            assert check_positive_definite(build_joint_precision(w, spec))

    def test_diagonal_dominance_precheck(self):
        assert is_diagonally_dominant(np.array([[2.0, 0.5], [0.5, 2.0]]))
        assert not is_diagonally_dominant(np.array([[1.0, 1.5], [1.5, 1.0]]))


class TestSampling:
    def test_identity_precision_mean_recovery(self):
        import scipy.sparse as sp

        mu = np.array([1.0, -2.0, 0.5])
        g = JointGmrf(mu, sp.eye(3, format="csr"))
        rng = np.random.default_rng(7)
        draws = np.array([sample_gmrf(g, rng) for _ in range(10_000)])
        np.testing.assert_allclose(draws.mean(axis=0), mu, atol=4 / np.sqrt(10_000))

    def test_two_site_covariance_recovery(self):
        g = build_joint_precision(pair_adjacency(), scalar_spec(2, 0.2))
        rng = np.random.default_rng(11)
        draws = np.array([sample_gmrf(g, rng) for _ in range(50_000)])
        emp = np.cov(draws.T)
        expected = (1.0 / 0.96) * np.array([[1.0, -0.2], [-0.2, 1.0]])
        np.testing.assert_allclose(emp, expected, rtol=0.05)

    def test_reproducible_given_seed(self):
        g = build_joint_precision(pair_adjacency(), scalar_spec(2, 0.2))
        a = sample_gmrf(g, np.random.default_rng(3))
        b = sample_gmrf(g, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestConditionalCorrelation:
    def test_no_dependence_gives_zero_cross_block(self):
        t = np.array([[1.0, 0.3], [0.3, 2.0]])
        spec = GmrfSpec(t, np.zeros((2, 2)), constant_mean_design(4, 2), np.zeros(2))
        omega = conditional_correlation(spec)
        np.testing.assert_allclose(omega[:2, 2:], 0.0, atol=1e-12)

    def test_scalar_association_recovered(self):
        spec = GmrfSpec.from_association([[1.0]], [[0.2]],
                                         constant_mean_design(2, 1), [0.0])
        omega = conditional_correlation(spec)
        assert omega.shape == (2, 2)
        np.testing.assert_allclose(omega[0, 1], 0.2, atol=1e-10)

    def test_unit_diagonal_and_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            t = rng.random((2, 2)) - 0.5
            t = t @ t.T + 0.5 * np.eye(2)
            f = 0.3 * (rng.random((2, 2)) - 0.5)
            spec = GmrfSpec(t, f, constant_mean_design(3, 2), np.zeros(2))
            try:
                omega = conditional_correlation(spec)
            except NotPositiveDefinite:
                continue
            np.testing.assert_allclose(np.diag(omega), 1.0, atol=1e-12)
            assert np.all(np.abs(omega) <= 1 + 1e-12)
