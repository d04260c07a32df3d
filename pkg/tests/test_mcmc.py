import copy

import numpy as np
import pytest
from scipy import stats

from sdsem.config import RunConfig
from sdsem.errors import DimensionMismatch, ZeroWithinVariance
from sdsem.lattice import GmrfSpec, constant_mean_design
from sdsem.mcmc import (
    MhTuning,
    SamplerState,
    _collapsed_system,
    _draw_gaussian_canonical,
    deviance,
    gelman_rubin,
    inclusion_probability,
    pick_draw_columns,
    preliminary_run,
    run_chain,
    run_chains,
    sample_ecm_coeffs,
    sample_gmrf_hypers,
    sample_loadings,
    sample_obs_precisions,
    scales_from_variances,
    select_anchor_states,
    try_coef_proposal,
    wishart_logpdf,
)
from sdsem.params import PriorConfig
from sdsem.state_space import FactorPath, simulate
from sdsem.synthetic import make_true_params


def make_state(n_sites=4, m=1, l=1, n_periods=60, seed=0, order=2, ssvs=False,
               **prior_kwargs):
    rng = np.random.default_rng(seed)
    params, anchors, w = make_true_params(n_sites, m, l, rng, order=order)
    data, path = simulate(params, n_periods, rng, adjacency=w)
    state = SamplerState(
        params=params.copy(), factors=FactorPath(path.values.copy(), m=m),
        anchors=anchors, adjacency=w, z=data.z_matrix(),
        prior=PriorConfig(**prior_kwargs), order=order, ssvs_enabled=ssvs,
        mh=MhTuning(step_y=np.full(m, 0.01), step_x=np.full(l, 0.01)))
    return state, params, data


def desk_config(m=1, l=1, seed=3, **kwargs):
    base = dict(m=m, l=l, seed=seed, order=2, iterations=80, burn_in=30,
                thinning=2, chains=1, ssvs=False,
                preliminary_iterations=40, preliminary_burn_in=15)
    base.update(kwargs)
    return RunConfig(**base)


class TestDeviance:
    def test_perfect_fit_unit_variance(self):
        state, params, data = make_state()
        meas = params.meas
        meas.obs_var_y[:] = 1.0
        meas.obs_var_x[:] = 1.0
        path = state.factors
        z = meas.joint_mean() + path.values @ meas.joint_loadings().T
        n_t, n = z.shape
        assert deviance(params, z, path) == pytest.approx(n_t * n * np.log(2 * np.pi))

    def test_single_residual(self):
        state, params, _ = make_state(n_sites=1, n_periods=1)
        meas = params.meas
        meas.obs_var_y[:] = 1.0
        meas.obs_var_x[:] = 1.0
        path = FactorPath(np.zeros((1, 2)), m=1)
        z = meas.joint_mean() + np.array([[2.0, 0.0]])
        expected = 2 * np.log(2 * np.pi) + 4.0
        assert deviance(params, z, path) == pytest.approx(expected)

    def test_variance_scaling_identity(self):
        state, params, data = make_state(seed=5)
        z = state.z
        base = deviance(params, z, state.factors)
        scaled = copy.deepcopy(params)
        c = 3.7
        scaled.meas.obs_var_y = params.meas.obs_var_y * c
        scaled.meas.obs_var_x = params.meas.obs_var_x * c
        n_t, n = z.shape
        dev_c = deviance(scaled, z, state.factors)
        resid_term = base - n_t * n * np.log(2 * np.pi) \
            - n_t * np.log(params.meas.joint_obs_var()).sum()
        expected = base + n_t * n * np.log(c) - resid_term * (1 - 1 / c)
        assert dev_c == pytest.approx(expected, rel=1e-10)


class TestGelmanRubin:
    def test_identical_chains(self):
        chain = np.random.default_rng(0).standard_normal(500)
        n = len(chain)
        assert gelman_rubin([chain, chain.copy()]) == pytest.approx(
            np.sqrt((n - 1) / n))

    def test_same_distribution_converges(self):
        rng = np.random.default_rng(1)
        chains = [rng.standard_normal(10_000) for _ in range(4)]
        assert gelman_rubin(chains) < 1.05

    def test_disjoint_constants_raise(self):
        with pytest.raises(ZeroWithinVariance):
            gelman_rubin([np.ones(10), np.zeros(10)])

    def test_needs_two_chains(self):
        with pytest.raises(DimensionMismatch):
            gelman_rubin([np.ones(10)])


class TestAnchorSelection:
    def test_every_site_its_own_cluster(self):
        _, _, data = make_state(n_sites=4, n_periods=30)
        anchors = select_anchor_states(data, m=4, l=1, rng=np.random.default_rng(0))
        assert sorted(anchors.y_rows) == [0, 1, 2, 3]

    def test_separated_clusters(self):
        from sdsem.data import PanelDataset, make_periods
        from sdsem.lattice import AdjacencyMatrix

        rng = np.random.default_rng(2)
        y = np.vstack([10.0 + 0.1 * rng.standard_normal((3, 40)),
                       0.1 * rng.standard_normal((3, 40))])
        data = PanelDataset(
            sites=[f"s{i}" for i in range(6)], periods=make_periods("2000Q1", 40),
            y=y, x=y.copy(), adjacency=AdjacencyMatrix.grid(2, 3))
        anchors = select_anchor_states(data, m=2, l=2, rng=rng)
        groups = {r // 3 for r in anchors.y_rows}
        assert groups == {0, 1}
        # the high-mean cluster anchors the first factor
        assert anchors.y_rows[0] < 3

    def test_deterministic_given_seed(self):
        _, _, data = make_state(n_sites=9, m=2, l=2, n_periods=40, seed=8)
        a = select_anchor_states(data, 2, 2, np.random.default_rng(42))
        b = select_anchor_states(data, 2, 2, np.random.default_rng(42))
        assert a == b


class TestObsPrecisions:
    def test_conjugate_posterior_mean(self):
        state, params, _ = make_state(n_sites=1, m=1, l=1, n_periods=100, seed=1)
        # craft residuals with SSE exactly 50 on the first y series
        meas = state.params.meas
        z = meas.joint_mean() + state.factors.values @ meas.joint_loadings().T
        z[:, 0] += np.sqrt(0.5)
        state.z = z
        rng = np.random.default_rng(0)
        draws = []
        for _ in range(8000):
            sample_obs_precisions(state, rng)
            draws.append(1.0 / state.params.meas.obs_var_y[0])
        # posterior Gamma(0.01 + 50, 0.01 + 25): mean ~ 50.01 / 25.01
        assert np.mean(draws) == pytest.approx(50.01 / 25.01, rel=0.02)

    def test_prior_only_matches_prior_quantile(self):
        state, _, _ = make_state(seed=2)
        state.prior_only = True
        rng = np.random.default_rng(1)
        draws = []
        for _ in range(4000):
            sample_obs_precisions(state, rng)
            draws.append(1.0 / state.params.meas.obs_var_y[0])
        draws = np.asarray(draws)
        target = stats.gamma.cdf(1.0, 0.01, scale=1 / 0.01)
        freq = np.mean(draws < 1.0)
        assert abs(freq - target) < 4 * np.sqrt(target * (1 - target) / len(draws))


class TestSsvs:
    def test_equal_components_keep_prior(self):
        assert inclusion_probability(0.7, 2.0, 2.0, 0.5) == pytest.approx(0.5)

    def test_zero_coefficient_density_ratio(self):
        # spike sd 0.1 vs slab sd 1 at zero: inclusion = 1 / 11
        assert inclusion_probability(0.0, 0.01, 1.0, 0.5) == pytest.approx(1 / 11)

    def test_large_coefficient_always_included(self):
        assert inclusion_probability(50.0, 0.01, 1.0, 0.5) > 1 - 1e-12

    def test_scales_from_variances(self):
        prior = PriorConfig()
        scales = scales_from_variances(
            {"longrun": np.ones(3), "shortrun": np.ones(2), "shortrun_exo": [0.0]},
            prior)
        np.testing.assert_allclose(scales.longrun_spike, 0.1)
        np.testing.assert_allclose(scales.longrun_slab, 10.0)
        # degenerate variance estimates hit the floor but stay positive
        assert scales.shortrun_exo_spike[0] > 0


class TestLoadings:
    def test_canonical_draw_mean_is_gls(self):
        # flat-prior limit: the conditional mean equals least squares
        rng = np.random.default_rng(3)
        n = 400
        g = rng.standard_normal(n)
        beta_true = 1.7
        y = beta_true * g + 0.1 * rng.standard_normal(n)
        prec = np.array([[g @ g / 0.01 + 1e-12]])
        pot = np.array([g @ y / 0.01])
        draws = [_draw_gaussian_canonical(prec, pot, np.random.default_rng(i))[0]
                 for i in range(200)]
        ols = g @ y / (g @ g)
        assert np.mean(draws) == pytest.approx(ols, abs=4 * 0.1 / np.sqrt(g @ g * 200))
        mean = np.linalg.solve(prec, pot)[0]
        assert mean == pytest.approx(ols, abs=1e-6)

    def test_prior_dominated_limit(self):
        state, params, _ = make_state(n_sites=4, seed=4)
        spec = state.params.gmrf_y[0]
        # crank the prior precision via a tiny conditional covariance
        state.params.gmrf_y[0] = GmrfSpec.from_reparam(
            np.eye(1) * 1e-12, np.zeros((1, 1)), spec.mean_design, spec.mean_coef)
        sample_loadings(state, np.random.default_rng(0))
        prior_mean = state.params.gmrf_y[0].mean
        free = ~state.zero_mask("y")[:, 0]
        np.testing.assert_allclose(state.params.meas.loadings_y[free, 0],
                                   prior_mean[free], atol=1e-4)

    def test_constrained_entries_stay_zero(self):
        state, _, _ = make_state(n_sites=6, m=2, l=2, seed=5)
        rng = np.random.default_rng(7)
        mask_y = state.zero_mask("y")
        mask_x = state.zero_mask("x")
        for _ in range(10):
            sample_loadings(state, rng)
            assert np.all(state.params.meas.loadings_y[mask_y] == 0.0)
            assert np.all(state.params.meas.loadings_x[mask_x] == 0.0)
            for j, r in enumerate(state.anchors.y_rows):
                assert state.params.meas.loadings_y[r, j] > 0
            for j, r in enumerate(state.anchors.x_rows):
                assert state.params.meas.loadings_x[r, j] > 0


class TestGmrfHypers:
    def test_identical_proposal_always_accepted(self):
        state, _, _ = make_state(seed=6)
        state.mh = MhTuning(step_y=np.zeros(1), step_x=np.zeros(1))
        rng = np.random.default_rng(0)
        for _ in range(20):
            sample_gmrf_hypers(state, rng)
        for key, rate in state.mh.rates().items():
            if key.startswith("coef"):
                assert rate == 1.0

    def test_invalid_proposal_rejected(self):
        state, _, _ = make_state(seed=7)
        spec_before = state.params.gmrf_y[0]
        accepted = try_coef_proposal(state, "y", 0, np.array([[5.0]]),
                                     np.random.default_rng(0))
        assert not accepted
        assert state.params.gmrf_y[0] is spec_before

    def test_wishart_logpdf_matches_scipy(self):
        rng = np.random.default_rng(1)
        for dim in (1, 2, 3):
            root = rng.standard_normal((dim, dim))
            x = root @ root.T + dim * np.eye(dim)
            scale = np.eye(dim) * 0.37
            mine = wishart_logpdf(x, 20.0, scale)
            ref = stats.wishart.logpdf(x, 20.0, scale)
            assert mine == pytest.approx(ref, rel=1e-10)

    def test_coefficient_recovery_diffuse_prior(self):
        # fixed loadings drawn from a known field; diffuse coefficient prior
        from sdsem.lattice import AdjacencyMatrix, build_joint_precision, sample_gmrf

        rng = np.random.default_rng(11)
        w = AdjacencyMatrix.grid(6, 6)
        truth = -0.25
        design = constant_mean_design(36, 1)
        spec = GmrfSpec.from_reparam([[1.0]], [[truth]], design, [0.0])
        column = sample_gmrf(build_joint_precision(w, spec), rng)

        params, anchors, _ = make_true_params(36, 1, 1, rng)
        data, path = simulate(params, 10, rng, adjacency=w)
        state = SamplerState(
            params=params.copy(), factors=path, anchors=anchors, adjacency=w,
            z=data.z_matrix(), prior=PriorConfig(gmrf_coef_scale=10.0), order=2,
            ssvs_enabled=False,
            mh=MhTuning(step_y=np.full(1, 0.1), step_x=np.full(1, 0.1)))
        state.params.meas.loadings_y[:, 0] = column
        state.params.gmrf_y[0] = GmrfSpec.from_reparam(
            [[1.0]], [[0.0]], design, [0.0])
        draws = []
        for _ in range(3000):
            sample_gmrf_hypers(state, rng)
            draws.append(state.params.gmrf_y[0].spatial_coef_reparam[0, 0])
        lo, hi = np.percentile(draws[500:], [2.5, 97.5])
        assert lo < truth < hi
        assert np.mean(draws[500:]) < 0


class TestEcmCoeffs:
    def test_spike_only_prior_shrinks_to_zero(self):
        state, _, _ = make_state(n_sites=6, m=2, l=2, seed=9, ssvs=True)
        from sdsem.mcmc import SpikeSlabScales, _attach_ssvs

        e = state.params.ecm
        n_long = e.adjust_joint.size + e.adjust_cross.size + e.adjust_exo.size
        n_short = sum(k.size for k in e.shortrun_endo)
        n_short_exo = sum(k.size for k in e.shortrun_exo)
        scales = SpikeSlabScales(
            longrun_spike=np.full(n_long, 1e-12),
            longrun_slab=np.full(n_long, 1e-12),
            shortrun_spike=np.full(n_short, 1e-12),
            shortrun_slab=np.full(n_short, 1e-12),
            shortrun_exo_spike=np.full(n_short_exo, 1e-12),
            shortrun_exo_slab=np.full(n_short_exo, 1e-12))
        _attach_ssvs(state.params, scales)
        sample_ecm_coeffs(state, np.random.default_rng(0))
        assert np.max(np.abs(state.params.ecm.adjust_joint)) < 1e-5
        assert np.max(np.abs(np.hstack(state.params.ecm.shortrun_endo))) < 1e-5

    def test_longrun_block_structure_preserved(self):
        from sdsem.ecm import blocks_to_ecm

        state, _, _ = make_state(n_sites=6, m=2, l=2, seed=10)
        rng = np.random.default_rng(3)
        for _ in range(5):
            sample_ecm_coeffs(state, rng)
            form = blocks_to_ecm(state.params.ecm)
            assert np.count_nonzero(form.longrun[2:, :2]) == 0


class TestChainDrivers:
    def test_zero_retained_is_empty(self):
        _, _, data = make_state(n_sites=4, seed=11)
        cfg = desk_config()
        draws = run_chain(data, cfg, np.random.default_rng(0),
                          iterations=20, burn_in=20)
        assert draws.n_draws == 0

    def test_bit_identical_chains_same_seed(self):
        _, _, data = make_state(n_sites=4, seed=12)
        cfg = desk_config(seed=99)
        a = run_chain(data, cfg, np.random.default_rng(5))
        b = run_chain(data, cfg, np.random.default_rng(5))
        assert a.n_draws == b.n_draws == (80 - 30) // 2
        np.testing.assert_array_equal(a.deviances, b.deviances)
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa.meas.loadings_y, pb.meas.loadings_y)
            np.testing.assert_array_equal(pa.ecm.adjust_exo, pb.ecm.adjust_exo)

    def test_identification_invariants_all_draws(self):
        _, _, data = make_state(n_sites=6, m=2, l=2, seed=13)
        cfg = desk_config(m=2, l=2)
        draws = run_chain(data, cfg, np.random.default_rng(1))
        anchors = draws.meta.anchors
        for p in draws.params:
            sub_y = p.meas.loadings_y[list(anchors.y_rows)][:, :2]
            sub_x = p.meas.loadings_x[list(anchors.x_rows)][:, :2]
            assert np.all(np.diag(sub_y) > 0)
            assert np.all(np.diag(sub_x) > 0)
            assert sub_y[0, 1] == 0.0
            assert sub_x[0, 1] == 0.0
            assert np.all(p.meas.obs_var_y > 0)
            assert np.all(np.isfinite(p.meas.loadings_y))
        assert np.all(np.isfinite(draws.deviances))

    def test_thinning_bookkeeping(self):
        _, _, data = make_state(n_sites=4, seed=14)
        cfg = desk_config(iterations=70, burn_in=20, thinning=5)
        draws = run_chain(data, cfg, np.random.default_rng(2))
        assert draws.n_draws == (70 - 20) // 5
        assert draws.meta.iterations == 70

    def test_run_chains_shares_anchors(self):
        _, _, data = make_state(n_sites=6, m=2, l=2, seed=15)
        cfg = desk_config(m=2, l=2, chains=2, iterations=40, burn_in=10)
        chains = run_chains(data, cfg)
        assert len(chains) == 2
        assert chains[0].meta.anchors == chains[1].meta.anchors
        assert chains[0].meta.chain_id != chains[1].meta.chain_id

    def test_preliminary_scales_positive(self):
        _, _, data = make_state(n_sites=4, seed=16)
        cfg = desk_config()
        scales = preliminary_run(data, cfg, np.random.default_rng(3))
        assert np.all(scales.longrun_spike > 0)
        assert np.all(scales.longrun_slab >= scales.longrun_spike)

    def test_prior_recovery_gamma_components(self):
        # likelihood disabled: Gamma components must reproduce their priors
        _, _, data = make_state(n_sites=4, seed=17, n_periods=40)
        cfg = desk_config(iterations=1500, burn_in=200, thinning=1,
                          prior=PriorConfig(init_state_scale=1.0))
        draws = run_chain(data, cfg, np.random.default_rng(4), prior_only=True)
        tau = np.array([p.prec_factor_endo[0, 0] ** 2 for p in draws.params])
        target = stats.gamma.cdf(1.0, 2.0, scale=0.5)
        freq = np.mean(tau < 1.0)
        assert abs(freq - target) < 0.08
        obs_prec = np.array([1 / p.meas.obs_var_y[0] for p in draws.params])
        target_obs = stats.gamma.cdf(1.0, 0.01, scale=100.0)
        assert abs(np.mean(obs_prec < 1.0) - target_obs) < 0.05

    def test_prior_recovery_bernoulli_indicators(self):
        # a short panel keeps the path-coefficient coupling weak so the
        # indicators actually traverse the prior within the test budget
        _, _, data = make_state(n_sites=4, m=2, l=2, seed=18, n_periods=8)
        from sdsem.mcmc import SpikeSlabScales

        cfg = desk_config(m=2, l=2, iterations=3000, burn_in=300, thinning=1,
                          ssvs=True, prior=PriorConfig(init_state_scale=1.0))
        e_dims = dict(n_long=2 * 1 + 2 * 1 + 2 * 1, n_short=2 * 4, n_short_exo=2 * 2)
        scales = SpikeSlabScales(
            longrun_spike=np.full(e_dims["n_long"], 0.1),
            longrun_slab=np.full(e_dims["n_long"], 10.0),
            shortrun_spike=np.full(e_dims["n_short"], 0.1),
            shortrun_slab=np.full(e_dims["n_short"], 10.0),
            shortrun_exo_spike=np.full(e_dims["n_short_exo"], 0.1),
            shortrun_exo_slab=np.full(e_dims["n_short_exo"], 10.0))
        draws = run_chain(data, cfg, np.random.default_rng(5), prior_only=True,
                          scales=scales, ssvs_enabled=True)
        incl = np.array([p.ssvs.include_longrun.mean() for p in draws.params])
        assert abs(incl.mean() - 0.5) < 0.08

    def test_pick_draw_columns_shapes(self):
        _, _, data = make_state(n_sites=4, m=2, l=2, seed=19)
        cfg = desk_config(m=2, l=2)
        draws = run_chain(data, cfg, np.random.default_rng(6))
        cols = pick_draw_columns(draws)
        assert "loadings_y.0.0" in cols
        assert "ecm.adjust_joint.0.0" in cols
        assert "deviance" in cols
        lengths = {len(v) for v in cols.values()}
        assert lengths == {draws.n_draws}


class TestCollapse:
    def test_collapsed_filter_equals_direct(self):
        from sdsem.state_space import assemble_companion, kalman_filter

        rng = np.random.default_rng(20)
        params, anchors, w = make_true_params(6, 2, 1, rng)
        data, _ = simulate(params, 25, rng, adjacency=w)
        meas = params.meas
        ss = assemble_companion(params.dynamics(), meas)
        z0 = data.z_matrix() - meas.joint_mean()
        init = (np.zeros(ss.state_dim), 1e4 * np.eye(ss.state_dim))
        direct = kalman_filter(ss, z0, *init)
        ss_c, projector = _collapsed_system(ss, meas)
        collapsed = kalman_filter(ss_c, z0 @ projector, *init)
        np.testing.assert_allclose(collapsed.means, direct.means, atol=1e-8)
        np.testing.assert_allclose(collapsed.covs, direct.covs, atol=1e-8)
