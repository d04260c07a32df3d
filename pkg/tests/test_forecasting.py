import numpy as np
import pytest

from sdsem.ecm import EcmBlocks
from sdsem.errors import AlignmentMismatch, EmptyChain
from sdsem.forecasting import (
    ForecastResult,
    forecast_conditional,
    forecast_metrics,
    forecast_unconditional,
    implied_factor_path,
    k_step_state_moments,
)
from sdsem.mcmc import ChainMeta, PosteriorDraws
from sdsem.params import SdSemParams
from sdsem.state_space import FactorPath, MeasurementModel


def draws_from_blocks(blocks_list, loadings_y, loadings_x, obs_var=0.01,
                      n_periods=30, seed=0):
    rng = np.random.default_rng(seed)
    ny, m = np.atleast_2d(loadings_y).shape
    nx, l = np.atleast_2d(loadings_x).shape
    params, factors = [], []
    for blocks in blocks_list:
        meas = MeasurementModel(
            loadings_y=loadings_y, loadings_x=loadings_x,
            mean_y=np.zeros(ny), mean_x=np.zeros(nx),
            obs_var_y=np.full(ny, obs_var), obs_var_x=np.full(nx, obs_var))
        params.append(SdSemParams(
            meas=meas, gmrf_y=[None] * m, gmrf_x=[None] * l, ecm=blocks,
            prec_factor_endo=np.eye(m), prec_factor_exo=np.eye(l)))
        factors.append(FactorPath(rng.standard_normal((n_periods, m + l)), m=m))
    meta = ChainMeta(iterations=len(params), burn_in=0, thinning=1, seed=seed)
    return PosteriorDraws(params=params, factors=factors, meta=meta)


def stationary_blocks(m=1, l=1):
    # level VAR coefficients 0.5 via longrun = phi - I on both diagonals
    blocks = EcmBlocks.zeros(m, l, order=1, r_joint=m, r_exo=l)
    blocks.adjust_joint = -0.5 * np.eye(m)
    blocks.coint_joint_endo = np.eye(m)
    blocks.adjust_exo = -0.5 * np.eye(l)
    blocks.coint_exo = np.eye(l)
    return blocks


class TestStateMoments:
    def test_scalar_two_step(self):
        mean, cov = k_step_state_moments([[0.5]], [[1.0]], [1.0], 2)
        assert mean[0] == pytest.approx(0.25, abs=1e-12)
        assert cov[0, 0] == pytest.approx(1.25, abs=1e-12)

    def test_zero_transition_is_memoryless(self):
        mean, cov = k_step_state_moments([[0.0]], [[2.0]], [5.0], 7)
        assert mean[0] == 0.0
        assert cov[0, 0] == pytest.approx(2.0)


class TestUnconditional:
    def test_monte_carlo_matches_analytic(self):
        blocks = stationary_blocks()
        draws = draws_from_blocks([blocks], [[1.0]], [[1.0]], obs_var=1e-12)
        # freeze the terminal state at a known value
        draws.factors[0].values[-1] = [1.0, 0.0]
        rng = np.random.default_rng(1)
        result = forecast_unconditional(draws, horizon=3, rng=rng,
                                        replicates=40_000)
        ss_phi = np.array([[0.5, 0.0], [0.0, 0.5]])
        mean, cov = k_step_state_moments(ss_phi, np.eye(2), [1.0, 0.0], 3)
        emp = result.draws[:, 2, 0]
        se = emp.std() / np.sqrt(len(emp))
        assert emp.mean() == pytest.approx(mean[0], abs=4 * se)
        assert emp.var() == pytest.approx(cov[0, 0], rel=0.05)

    def test_variance_nondecreasing_in_horizon(self):
        blocks = stationary_blocks()
        draws = draws_from_blocks([blocks] * 5, [[1.0]], [[1.0]], obs_var=1e-6)
        result = forecast_unconditional(draws, horizon=6,
                                        rng=np.random.default_rng(2),
                                        replicates=3000)
        var_by_step = result.draws[:, :, 0].var(axis=0)
        assert np.all(np.diff(var_by_step) > -0.05 * var_by_step[:-1])

    def test_empty_chain(self):
        meta = ChainMeta(iterations=0, burn_in=0, thinning=1, seed=0)
        with pytest.raises(EmptyChain):
            forecast_unconditional(PosteriorDraws([], [], meta), 3,
                                   np.random.default_rng(0))


class TestConditional:
    def test_orthonormal_pseudo_inverse(self):
        q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((5, 2)))
        x_future = np.random.default_rng(4).standard_normal((5, 3))
        f = implied_factor_path(q, np.zeros(5), x_future)
        np.testing.assert_allclose(f, (q.T @ x_future).T, atol=1e-12)

    def test_exact_factor_recovery(self):
        rng = np.random.default_rng(5)
        loadings_x = rng.standard_normal((6, 2))
        mean_x = rng.standard_normal(6)
        f_star = rng.standard_normal((4, 2))
        x_future = loadings_x @ f_star.T + mean_x[:, None]
        rec = implied_factor_path(loadings_x, mean_x, x_future)
        np.testing.assert_allclose(rec, f_star, atol=1e-10)

    def test_scenario_information_tightens_forecasts(self):
        # conditional predictive variance never exceeds unconditional on
        # average for a system with strong cross-coefficients
        blocks = stationary_blocks()
        blocks.adjust_cross = np.array([[0.45]])  # strong f -> g channel
        draws = draws_from_blocks([blocks] * 10, [[1.0]], [[1.0]], obs_var=0.01,
                                  seed=7)
        rng = np.random.default_rng(8)
        unc = forecast_unconditional(draws, horizon=5, rng=rng, replicates=800)
        x_future = np.zeros((1, 5))
        cond = forecast_conditional(draws, x_future, np.random.default_rng(9),
                                    replicates=800)
        v_unc = unc.draws[:, :, 0].var(axis=0)
        v_cond = cond.draws[:, :, 0].var(axis=0)
        assert v_cond.mean() < v_unc.mean()

    def test_deterministic_mode_is_noise_free(self):
        blocks = stationary_blocks()
        draws = draws_from_blocks([blocks], [[1.0]], [[1.0]])
        x_future = np.ones((1, 4))
        a = forecast_conditional(draws, x_future, np.random.default_rng(0),
                                 deterministic=True)
        b = forecast_conditional(draws, x_future, np.random.default_rng(99),
                                 deterministic=True)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_wrong_row_count(self):
        blocks = stationary_blocks()
        draws = draws_from_blocks([blocks], [[1.0]], [[1.0]])
        with pytest.raises(AlignmentMismatch):
            forecast_conditional(draws, np.zeros((3, 4)),
                                 np.random.default_rng(0))


def degenerate_result(point, horizon=2, n_rows=2):
    draws = np.tile(np.asarray(point, dtype=float), (1, 1, 1))
    return ForecastResult(horizon=horizon, draws=draws, mean=draws[0],
                          median=draws[0], lower=draws[0], upper=draws[0],
                          level=0.95)


class TestMetrics:
    def test_perfect_point_forecast(self):
        point = [[1.0, 2.0], [3.0, 4.0]]
        result = degenerate_result(point)
        metrics = forecast_metrics(result, np.asarray(point).T)
        assert metrics.rmse == 0.0
        assert metrics.mae == 0.0
        assert metrics.cp == 1.0
        assert metrics.aiw == 0.0

    def test_constant_bias(self):
        point = np.zeros((2, 2))
        result = degenerate_result(point)
        truth = np.full((2, 2), -1.7)
        metrics = forecast_metrics(result, truth)
        assert metrics.mae == pytest.approx(1.7)
        assert metrics.rmse == pytest.approx(1.7)

    def test_hand_computed_errors(self):
        point = np.zeros((1, 4))
        result = ForecastResult(horizon=1, draws=point[None, :, :].transpose(0, 2, 1),
                                mean=point.T.reshape(4, 1)[0:1]*0,  # unused below
                                median=None, lower=None, upper=None, level=0.95)
        # simpler: build a 4-cell forecast with zero point forecasts
        draws = np.zeros((1, 4, 1))
        result = ForecastResult(horizon=4, draws=draws, mean=draws[0],
                                median=draws[0], lower=draws[0], upper=draws[0],
                                level=0.95)
        truth = np.array([[1.0, -1.0, 3.0, -3.0]])
        metrics = forecast_metrics(result, truth)
        assert metrics.mae == pytest.approx(2.0)
        assert metrics.rmse == pytest.approx(np.sqrt(5.0))
        assert metrics.rmse >= metrics.mae

    def test_log_back_transform(self):
        draws = np.log(np.full((1, 2, 1), 4.0))
        result = ForecastResult(horizon=2, draws=draws, mean=draws[0],
                                median=draws[0], lower=draws[0], upper=draws[0],
                                level=0.95)
        truth = np.log(np.array([[4.0, 8.0]]))
        metrics = forecast_metrics(result, truth, transform="log")
        assert metrics.mae == pytest.approx(2.0)  # |4 - 8| averaged with |4 - 4|

    def test_widening_level_never_shrinks_interval(self):
        rng = np.random.default_rng(11)
        draws = rng.standard_normal((500, 3, 2))
        result = ForecastResult(horizon=3, draws=draws, mean=draws.mean(0),
                                median=np.median(draws, axis=0),
                                lower=np.percentile(draws, 2.5, axis=0),
                                upper=np.percentile(draws, 97.5, axis=0),
                                level=0.95)
        truth = np.zeros((2, 3))
        narrow = forecast_metrics(result, truth, level=0.5)
        wide = forecast_metrics(result, truth, level=0.95)
        assert wide.aiw >= narrow.aiw
        assert wide.cp >= narrow.cp

    def test_alignment_check(self):
        result = degenerate_result(np.zeros((2, 2)))
        with pytest.raises(AlignmentMismatch):
            forecast_metrics(result, np.zeros((3, 5)))
