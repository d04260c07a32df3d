import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdsem.ecm import (
    EcmBlocks,
    EcmForm,
    blocks_to_ecm,
    draw_ranks,
    ecm_to_var,
    rank_estimate,
    rank_posterior,
    rank_posterior_mode,
    var_to_ecm,
)
from sdsem.errors import BlockStructureViolation, DimensionMismatch, EmptyChain


def random_block_triangular(rng, m, l, scale=0.3):
    a = scale * rng.standard_normal((m + l, m + l))
    a[m:, :m] = 0.0
    return a


class TestVarEcmRoundTrip:
    def test_identity_var_is_pure_random_walk(self):
        ecm = var_to_ecm([np.eye(3)], m=2)
        np.testing.assert_array_equal(ecm.longrun, np.zeros((3, 3)))
        assert ecm.shortrun == []

    def test_scalar_single_lag(self):
        ecm = var_to_ecm([np.array([[0.5]])], m=1)
        np.testing.assert_allclose(ecm.longrun, [[-0.5]])

    def test_two_lag_diagonal(self):
        phis = [0.5 * np.eye(2), 0.3 * np.eye(2)]
        ecm = var_to_ecm(phis, m=1)
        np.testing.assert_allclose(ecm.longrun, -0.2 * np.eye(2), atol=1e-15)
        np.testing.assert_allclose(ecm.shortrun[0], -0.3 * np.eye(2), atol=1e-15)

    def test_inverse_of_two_lag_example(self):
        ecm = EcmForm(longrun=-0.2 * np.eye(2), shortrun=[-0.3 * np.eye(2)], m=1)
        phis = ecm_to_var(ecm)
        np.testing.assert_allclose(phis[0], 0.5 * np.eye(2), atol=1e-15)
        np.testing.assert_allclose(phis[1], 0.3 * np.eye(2), atol=1e-15)

    def test_zero_longrun_no_shortrun_gives_identity(self):
        ecm = EcmForm(longrun=np.zeros((2, 2)), shortrun=[], m=1)
        (phi,) = ecm_to_var(ecm)
        np.testing.assert_array_equal(phi, np.eye(2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3),
           st.integers(1, 3))
    def test_round_trip_exact(self, seed, m, l, p):
        rng = np.random.default_rng(seed)
        phis = [random_block_triangular(rng, m, l) for _ in range(p)]
        ecm = var_to_ecm(phis, m=m)
        back = ecm_to_var(ecm)
        for orig, rec in zip(phis, back):
            np.testing.assert_allclose(rec, orig, atol=1e-12)
        again = var_to_ecm(back, m=m)
        np.testing.assert_allclose(again.longrun, ecm.longrun, atol=1e-12)

    def test_block_violation_rejected(self):
        bad = np.ones((3, 3))
        with pytest.raises(BlockStructureViolation):
            var_to_ecm([bad], m=2)

    def test_size_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            var_to_ecm([np.eye(2), np.eye(3)], m=1)


class TestBlocksToEcm:
    def test_all_zero_blocks(self):
        ecm = blocks_to_ecm(EcmBlocks.zeros(2, 2, order=2))
        np.testing.assert_array_equal(ecm.longrun, np.zeros((4, 4)))
        assert len(ecm.shortrun) == 1

    def test_rank_zero_space_forces_zero_longrun(self):
        # m = l = 1 leaves no room for cointegrating relations
        ecm = blocks_to_ecm(EcmBlocks.zeros(1, 1))
        np.testing.assert_array_equal(ecm.longrun, np.zeros((2, 2)))

    def test_dense_reconstruction_oracle(self):
        blocks = EcmBlocks(
            adjust_joint=np.array([[1.0], [0.0]]),
            coint_joint_endo=np.array([[1.0], [-1.0]]),
            coint_joint_exo=np.zeros((2, 1)),
            adjust_cross=np.zeros((2, 1)),
            adjust_exo=np.array([[-0.5], [0.0]]),
            coint_exo=np.array([[1.0], [0.0]]),
        )
        # force the exogenous product to -0.5 * I2
        blocks.adjust_exo = -0.5 * np.eye(2)[:, :1]
        blocks.coint_exo = np.eye(2)[:, :1]
        ecm = blocks_to_ecm(blocks)
        np.testing.assert_allclose(ecm.longrun[:2, :2], [[1.0, -1.0], [0.0, 0.0]])
        # brute-force oracle: assemble the blocks densely and compare
        top_left = blocks.adjust_joint @ blocks.coint_joint_endo.T
        top_right = (blocks.adjust_joint @ blocks.coint_joint_exo.T
                     + blocks.adjust_cross @ blocks.coint_exo.T)
        bottom_right = blocks.adjust_exo @ blocks.coint_exo.T
        expected = np.block([[top_left, top_right],
                             [np.zeros((2, 2)), bottom_right]])
        np.testing.assert_allclose(ecm.longrun, expected, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_lower_left_block_exactly_zero(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        l = int(rng.integers(1, 4))
        order = int(rng.integers(1, 4))
        blocks = EcmBlocks.zeros(m, l, order=order)
        blocks.adjust_joint = rng.standard_normal(blocks.adjust_joint.shape)
        blocks.coint_joint_endo = rng.standard_normal(blocks.coint_joint_endo.shape)
        blocks.coint_joint_exo = rng.standard_normal(blocks.coint_joint_exo.shape)
        blocks.adjust_cross = rng.standard_normal(blocks.adjust_cross.shape)
        blocks.adjust_exo = rng.standard_normal(blocks.adjust_exo.shape)
        blocks.coint_exo = rng.standard_normal(blocks.coint_exo.shape)
        blocks.shortrun_endo = [rng.standard_normal((m, m + l))
                                for _ in range(order - 1)]
        blocks.shortrun_exo = [rng.standard_normal((l, l)) for _ in range(order - 1)]
        ecm = blocks_to_ecm(blocks)
        assert np.count_nonzero(ecm.longrun[m:, :m]) == 0
        for s in ecm.shortrun:
            assert np.count_nonzero(s[m:, :m]) == 0

    def test_no_cross_cointegration_iff_cross_block_zero(self):
        blocks = EcmBlocks.zeros(2, 2)
        blocks.adjust_joint = np.array([[0.4], [-0.2]])
        blocks.coint_joint_endo = np.array([[1.0], [0.5]])
        # coint_joint_exo and the exogenous-only relation stay zero
        ecm = blocks_to_ecm(blocks)
        assert rank_estimate(blocks.product_cross_total()) == 0
        np.testing.assert_array_equal(ecm.longrun[:2, 2:], np.zeros((2, 2)))


class TestRankEstimate:
    def test_zero_matrix(self):
        assert rank_estimate(np.zeros((3, 3))) == 0

    def test_diagonal_thresholding(self):
        assert rank_estimate(np.diag([1.2, 0.3, 0.04]), threshold=0.05) == 2

    def test_identity(self):
        assert rank_estimate(np.eye(3)) == 3

    def test_empty_rank_space(self):
        assert rank_estimate(np.zeros((2, 0))) == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_orthogonal_invariance(self, seed):
        rng = np.random.default_rng(seed)
        mat = rng.standard_normal((3, 4))
        q1, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        q2, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        assert rank_estimate(mat) == rank_estimate(q1 @ mat @ q2)


class TestRankPosterior:
    def test_degenerate_chain(self):
        blocks = EcmBlocks.zeros(2, 2)
        table = rank_posterior([blocks] * 25)
        assert table["r_f"][0] == 1.0
        assert rank_posterior_mode(table)["r_f"] == 0

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        chain = []
        for _ in range(40):
            b = EcmBlocks.zeros(3, 3)
            b.adjust_exo = rng.standard_normal((3, 2))
            b.coint_exo = rng.standard_normal((3, 2))
            chain.append(b)
        table = rank_posterior(chain)
        for probs in table.values():
            assert abs(probs.sum() - 1.0) < 1e-12

    def test_empty_chain_raises(self):
        with pytest.raises(EmptyChain):
            rank_posterior([])

    def test_known_rank_one(self):
        b = EcmBlocks.zeros(2, 2)
        b.adjust_exo = np.array([[0.8], [0.4]])
        b.coint_exo = np.array([[1.0], [-1.0]])
        r = draw_ranks(b)
        assert r.r_f == 1
        assert r.r_d == 0
