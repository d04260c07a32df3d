"""Predictive simulation of the response panel and forecast accuracy metrics.

Unconditional forecasts propagate the companion state with innovation noise
from the terminal state of each retained draw, then push the state through
the measurement equation.  Conditional (scenario) forecasts instead fix the
future predictor panel, map it into the exogenous factor space through the
Moore-Penrose pseudo-inverse of the drawn exogenous loadings and drive the
endogenous recursion with those values; state noise stays on by default so
the scenario intervals remain calibrated, with a deterministic mode for
point paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentMismatch, DimensionMismatch, EmptyChain, \
    NonFiniteForecast, RankDeficientLoadings
from .multipliers import pseudo_inverse_loadings
from .state_space import assemble_companion

EXPLOSION_LIMIT = 1e8


@dataclass
class ForecastResult:
    """Posterior predictive draws of the response panel over the horizon."""

    horizon: int
    draws: np.ndarray        # (n_kept, horizon, n_y_rows)
    mean: np.ndarray         # (horizon, n_y_rows)
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    n_excluded: int = 0
    conditional: bool = False

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


@dataclass
class ForecastMetrics:
    rmse: float
    mae: float
    cp: float
    aiw: float


def k_step_state_moments(transition, state_cov, terminal_state, k: int):
    """Analytic k-step mean and covariance of the companion state."""
    transition = np.atleast_2d(np.asarray(transition, dtype=float))
    state_cov = np.atleast_2d(np.asarray(state_cov, dtype=float))
    mean = np.atleast_1d(np.asarray(terminal_state, dtype=float)).copy()
    cov = np.zeros_like(state_cov)
    for _ in range(k):
        mean = transition @ mean
        cov = transition @ cov @ transition.T + state_cov
    return mean, cov


def implied_factor_path(loadings_x, mean_x, x_future) -> np.ndarray:
    """Exogenous factor path implied by a fixed future predictor panel.

    ``x_future`` is (n_x_rows, K); the mean is subtracted before applying the
    pseudo-inverse.  Returns (K, l).
    """
    x_future = np.atleast_2d(np.asarray(x_future, dtype=float))
    pinv = pseudo_inverse_loadings(loadings_x)
    return ((x_future - np.asarray(mean_x, dtype=float)[:, None]).T @ pinv.T)


def _terminal_companion_state(path_values: np.ndarray, order: int) -> np.ndarray:
    k = path_values.shape[1]
    state = np.zeros(k * order)
    for i in range(order):
        row = path_values.shape[0] - 1 - i
        if row >= 0:
            state[i * k:(i + 1) * k] = path_values[row]
    return state


def _collect(y_paths, horizon, level, n_excluded, conditional):
    if not y_paths:
        raise NonFiniteForecast("every predictive draw was excluded")
    stack = np.stack(y_paths)
    alpha = 100.0 * (1.0 - level) / 2.0
    return ForecastResult(
        horizon=horizon,
        draws=stack,
        mean=stack.mean(axis=0),
        median=np.percentile(stack, 50.0, axis=0),
        lower=np.percentile(stack, alpha, axis=0),
        upper=np.percentile(stack, 100.0 - alpha, axis=0),
        level=level,
        n_excluded=n_excluded,
        conditional=conditional)


def forecast_unconditional(draws, horizon: int, rng: np.random.Generator,
                           replicates: int = 1, level: float = 0.95) -> ForecastResult:
    """Composition-sampled k-step predictive draws of the response panel.

    For each retained draw the companion state is advanced ``horizon`` steps
    with fresh innovation noise from its terminal value and observed through
    the measurement equation.  Draws exceeding the explosion limit are
    excluded from the summaries and counted.
    """
    params = getattr(draws, "params", None)
    factors = getattr(draws, "factors", None)
    if params is None:
        params = [p for d in draws for p in d.params]
        factors = [f for d in draws for f in d.factors]
    if not params:
        raise EmptyChain("no retained draws to forecast from")
    if horizon <= 0:
        raise DimensionMismatch("horizon must be positive")

    y_paths, n_excluded = [], 0
    for p, path in zip(params, factors):
        ss = assemble_companion(p.dynamics(), p.meas)
        chol = np.linalg.cholesky(ss.state_noise_cov + 1e-14 * np.eye(ss.m + ss.l))
        terminal = _terminal_companion_state(path.values, ss.order)
        for _ in range(replicates):
            state = terminal.copy()
            ys = np.empty((horizon, p.meas.n_obs_y))
            ok = True
            for step in range(horizon):
                noise = ss.input @ (chol @ rng.standard_normal(ss.m + ss.l))
                state = ss.transition @ state + noise
                obs_noise = rng.standard_normal(p.meas.n_obs_y) \
                    * np.sqrt(p.meas.obs_var_y)
                ys[step] = p.meas.mean_y + p.meas.loadings_y @ state[:ss.m] \
                    + obs_noise
                if np.max(np.abs(ys[step])) > EXPLOSION_LIMIT:
                    ok = False
                    break
            if ok:
                y_paths.append(ys)
            else:
                n_excluded += 1
    return _collect(y_paths, horizon, level, n_excluded, conditional=False)


def forecast_conditional(draws, x_future: np.ndarray, rng: np.random.Generator,
                         replicates: int = 1, level: float = 0.95,
                         deterministic: bool = False) -> ForecastResult:
    """Scenario forecasts given a complete future predictor panel.

    Per draw the exogenous factor path comes from the pseudo-inverse of that
    draw's exogenous loadings; the endogenous recursion then runs with (by
    default) state noise and observation noise.  Draws with rank-deficient
    exogenous loadings are skipped and counted.
    """
    params = getattr(draws, "params", None)
    factors = getattr(draws, "factors", None)
    if params is None:
        params = [p for d in draws for p in d.params]
        factors = [f for d in draws for f in d.factors]
    if not params:
        raise EmptyChain("no retained draws to forecast from")
    x_future = np.atleast_2d(np.asarray(x_future, dtype=float))
    horizon = x_future.shape[1]
    if x_future.shape[0] != params[0].meas.n_obs_x:
        raise AlignmentMismatch("future predictor panel has wrong row count")

    y_paths, n_excluded = [], 0
    for p, path in zip(params, factors):
        dyn = p.dynamics()
        cs, ds, _ = dyn.padded(dyn.order)
        try:
            f_future = implied_factor_path(p.meas.loadings_x, p.meas.mean_x,
                                           x_future)
        except RankDeficientLoadings:
            n_excluded += replicates
            continue
        chol = np.linalg.cholesky(dyn.state_cov_endo + 1e-14 * np.eye(dyn.m))
        g_tail = path.endo[::-1][:dyn.order]
        f_tail = path.exo[::-1][:dyn.order]
        for _ in range(replicates):
            g_hist = [g_tail[i] if i < len(g_tail) else np.zeros(dyn.m)
                      for i in range(dyn.order)]
            f_hist = [f_tail[i] if i < len(f_tail) else np.zeros(dyn.l)
                      for i in range(dyn.order)]
            ys = np.empty((horizon, p.meas.n_obs_y))
            ok = True
            for step in range(horizon):
                g = np.zeros(dyn.m)
                for i in range(dyn.order):
                    g += cs[i] @ g_hist[i] + ds[i] @ f_hist[i]
                if not deterministic:
                    g = g + chol @ rng.standard_normal(dyn.m)
                obs_noise = 0.0 if deterministic else \
                    rng.standard_normal(p.meas.n_obs_y) * np.sqrt(p.meas.obs_var_y)
                ys[step] = p.meas.mean_y + p.meas.loadings_y @ g + obs_noise
                if np.max(np.abs(ys[step])) > EXPLOSION_LIMIT:
                    ok = False
                    break
                g_hist = [g] + g_hist[:-1]
                # the scenario value at this step becomes the newest lag
                f_hist = [f_future[step]] + f_hist[:-1]
            if ok:
                y_paths.append(ys)
            else:
                n_excluded += 1
    return _collect(y_paths, horizon, level, n_excluded, conditional=True)


def forecast_metrics(result: ForecastResult, truth: np.ndarray,
                     level: float = None, transform: str = None,
                     deflator: np.ndarray = None) -> ForecastMetrics:
    """RMSE/MAE/coverage/width of a forecast against a held-out panel.

    ``truth`` is (n_y_rows, K) in the same (transformed) units the model was
    fitted on; pass ``transform="log"`` (plus a deflator panel when one was
    applied) to score on the original scale.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=float)).T  # -> (K, n_rows)
    if truth.shape != result.mean.shape:
        raise AlignmentMismatch(
            f"truth shape {truth.shape} does not match forecast {result.mean.shape}")

    draws = result.draws
    if transform == "log":
        draws = np.exp(draws)
        truth = np.exp(truth)
        if deflator is not None:
            scale = np.atleast_2d(np.asarray(deflator, dtype=float)).T
            draws = draws * scale
            truth = truth * scale
    elif transform is not None:
        raise AlignmentMismatch(f"unknown transform {transform!r}")

    level = result.level if level is None else level
    alpha = 100.0 * (1.0 - level) / 2.0
    point = draws.mean(axis=0)
    lower = np.percentile(draws, alpha, axis=0)
    upper = np.percentile(draws, 100.0 - alpha, axis=0)

    err = truth - point
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    cp = float(np.mean((truth >= lower) & (truth <= upper)))
    aiw = float(np.mean(upper - lower))
    assert rmse >= mae - 1e-12, "power-mean inequality violated"
    return ForecastMetrics(rmse=rmse, mae=mae, cp=cp, aiw=aiw)
