"""State-space form of the latent-factor model: filtering, smoothing, FFBS.

The measurement layer maps a small number of latent factors to the observed
panel; the factor dynamics are an autoregressive distributed-lag system

    g(t) = sum_i C_i g(t-i) + sum_j D_j f(t-j) + xi(t)
    f(t) = sum_k R_k f(t-k) + eta(t)

stacked as a VAR(1) companion system on alpha(t) = [d(t); ...; d(t-p+1)] with
d(t) = [g(t); f(t)].  The filter uses Joseph-form covariance updates and
symmetrizes after every step; rows of the measurement matrix belonging to
missing observations are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DimensionMismatch,
    InnovationCovSingular,
    NonFiniteSample,
    NotPositiveDefinite,
)

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_psd(mat, name: str) -> np.ndarray:
    # PSD is enough here: degenerate (even zero) innovations are legal for
    # simulation and filtering; the sampler enforces strict positivity itself.
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not np.allclose(mat, mat.T):
        raise ValueError(f"{name} must be symmetric")
    if np.any(np.linalg.eigvalsh(mat) < -1e-10):
        raise NotPositiveDefinite(f"{name} must be positive semi-definite")
    return mat


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """A square root L with L L' = cov, tolerating singular covariances."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class MeasurementModel:
    """Loadings, means and diagonal observation variances of both panels."""

    loadings_y: np.ndarray
    loadings_x: np.ndarray
    mean_y: np.ndarray
    mean_x: np.ndarray
    obs_var_y: np.ndarray
    obs_var_x: np.ndarray

    def __post_init__(self):
        self.loadings_y = np.atleast_2d(np.asarray(self.loadings_y, dtype=float))
        self.loadings_x = np.atleast_2d(np.asarray(self.loadings_x, dtype=float))
        self.mean_y = np.atleast_1d(np.asarray(self.mean_y, dtype=float))
        self.mean_x = np.atleast_1d(np.asarray(self.mean_x, dtype=float))
        self.obs_var_y = np.atleast_1d(np.asarray(self.obs_var_y, dtype=float))
        self.obs_var_x = np.atleast_1d(np.asarray(self.obs_var_x, dtype=float))
        ny, m = self.loadings_y.shape
        nx, l = self.loadings_x.shape
        if m > ny or l > nx:
            raise DimensionMismatch("more factors than observed series")
        for name, vec, n in (("mean_y", self.mean_y, ny), ("mean_x", self.mean_x, nx),
                             ("obs_var_y", self.obs_var_y, ny),
                             ("obs_var_x", self.obs_var_x, nx)):
            if vec.shape != (n,):
                raise DimensionMismatch(f"{name} must have length {n}")
        if np.any(self.obs_var_y < 0) or np.any(self.obs_var_x < 0):
            raise ValueError("observation variances must be non-negative")

    @property
    def n_obs_y(self) -> int:
        return self.loadings_y.shape[0]

    @property
    def n_obs_x(self) -> int:
        return self.loadings_x.shape[0]

    @property
    def n_factors_y(self) -> int:
        return self.loadings_y.shape[1]

    @property
    def n_factors_x(self) -> int:
        return self.loadings_x.shape[1]

    def joint_loadings(self) -> np.ndarray:
        """Block-diagonal map from d(t) = [g; f] to the stacked observation."""
        ny, m = self.loadings_y.shape
        nx, l = self.loadings_x.shape
        h = np.zeros((ny + nx, m + l))
        h[:ny, :m] = self.loadings_y
        h[ny:, m:] = self.loadings_x
        return h

    def joint_mean(self) -> np.ndarray:
        return np.concatenate([self.mean_y, self.mean_x])

    def joint_obs_var(self) -> np.ndarray:
        return np.concatenate([self.obs_var_y, self.obs_var_x])


@dataclass
class FactorDynamics:
    """Coefficient matrices and innovation covariances of the factor system."""

    endo_coefs: list = field(default_factory=list)   # C_i, m x m
    cross_coefs: list = field(default_factory=list)  # D_j, m x l
    exo_coefs: list = field(default_factory=list)    # R_k, l x l
    state_cov_endo: np.ndarray = None                # cov of xi
    state_cov_exo: np.ndarray = None                 # cov of eta

    def __post_init__(self):
        self.endo_coefs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.endo_coefs]
        self.cross_coefs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.cross_coefs]
        self.exo_coefs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.exo_coefs]
        self.state_cov_endo = _as_psd(self.state_cov_endo, "state_cov_endo")
        self.state_cov_exo = _as_psd(self.state_cov_exo, "state_cov_exo")
        m = self.state_cov_endo.shape[0]
        l = self.state_cov_exo.shape[0]
        for c in self.endo_coefs:
            if c.shape != (m, m):
                raise DimensionMismatch("endo coefficient shape mismatch")
        for c in self.cross_coefs:
            if c.shape != (m, l):
                raise DimensionMismatch("cross coefficient shape mismatch")
        for c in self.exo_coefs:
            if c.shape != (l, l):
                raise DimensionMismatch("exo coefficient shape mismatch")

    @property
    def m(self) -> int:
        return self.state_cov_endo.shape[0]

    @property
    def l(self) -> int:
        return self.state_cov_exo.shape[0]

    @property
    def lags(self) -> tuple:
        return (len(self.endo_coefs), len(self.cross_coefs), len(self.exo_coefs))

    @property
    def order(self) -> int:
        """Effective joint order: shorter coefficient lists are zero-padded."""
        return max(1, *self.lags) if any(self.lags) else 1

    def padded(self, order: int = None) -> tuple:
        """(C, D, R) lists zero-padded to the requested order."""
        order = self.order if order is None else order
        m, l = self.m, self.l

        def pad(coefs, shape):
            out = list(coefs[:order])
            out += [np.zeros(shape)] * (order - len(out))
            return out

        return (pad(self.endo_coefs, (m, m)), pad(self.cross_coefs, (m, l)),
                pad(self.exo_coefs, (l, l)))

    def companion_blocks(self, order: int = None) -> list:
        """Upper-block-triangular joint coefficients [[C_i, D_i], [0, R_i]]."""
        cs, ds, rs = self.padded(order)
        m, l = self.m, self.l
        blocks = []
        for c, d, r in zip(cs, ds, rs):
            b = np.zeros((m + l, m + l))
            b[:m, :m] = c
            b[:m, m:] = d
            b[m:, m:] = r
            blocks.append(b)
        return blocks

    def joint_state_cov(self) -> np.ndarray:
        m, l = self.m, self.l
        cov = np.zeros((m + l, m + l))
        cov[:m, :m] = self.state_cov_endo
        cov[m:, m:] = self.state_cov_exo
        return cov


@dataclass
class StateSpaceForm:
    """Companion-form system matrices consumed by the filter and sampler."""

    transition: np.ndarray       # (k*p, k*p) with k = m + l
    input: np.ndarray            # (k*p, k) selector lifting d-innovations
    meas: np.ndarray             # (n, k*p)
    state_noise_cov: np.ndarray  # (k, k) innovation covariance of d(t)
    obs_noise_cov: np.ndarray    # (n, n) symmetric
    m: int
    l: int
    order: int

    @property
    def state_dim(self) -> int:
        return self.transition.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.meas.shape[0]

    def state_noise_full(self) -> np.ndarray:
        """Innovation covariance lifted to the companion state."""
        return self.input @ self.state_noise_cov @ self.input.T

    def factor_blocks(self) -> tuple:
        """Recover the (C, D, R) coefficient lists from the companion layout."""
        k = self.m + self.l
        cs, ds, rs = [], [], []
        for i in range(self.order):
            blk = self.transition[:k, i * k:(i + 1) * k]
            cs.append(blk[:self.m, :self.m].copy())
            ds.append(blk[:self.m, self.m:].copy())
            rs.append(blk[self.m:, self.m:].copy())
        return cs, ds, rs


@dataclass
class FactorPath:
    """Latent factor values d(t) = [g(t); f(t)], one row per period."""

    values: np.ndarray
    m: int

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteSample("factor path contains non-finite values")
        if self.m > self.values.shape[1]:
            raise DimensionMismatch("endo split exceeds path width")

    @property
    def n_periods(self) -> int:
        return self.values.shape[0]

    @property
    def l(self) -> int:
        return self.values.shape[1] - self.m

    @property
    def endo(self) -> np.ndarray:
        """g(t), one row per period."""
        return self.values[:, :self.m]

    @property
    def exo(self) -> np.ndarray:
        """f(t), one row per period."""
        return self.values[:, self.m:]


def assemble_companion(dyn: FactorDynamics, meas: MeasurementModel) -> StateSpaceForm:
    """Stack the factor dynamics into the VAR(1) companion state space."""
    if meas.n_factors_y != dyn.m or meas.n_factors_x != dyn.l:
        raise DimensionMismatch("measurement and dynamics disagree on factor counts")
    m, l = dyn.m, dyn.l
    k = m + l
    order = dyn.order
    blocks = dyn.companion_blocks(order)

    transition = np.zeros((k * order, k * order))
    for i, blk in enumerate(blocks):
        transition[:k, i * k:(i + 1) * k] = blk
    for i in range(order - 1):
        transition[(i + 1) * k:(i + 2) * k, i * k:(i + 1) * k] = np.eye(k)

    inp = np.zeros((k * order, k))
    inp[:k, :] = np.eye(k)

    h = np.zeros((meas.n_obs_y + meas.n_obs_x, k * order))
    h[:, :k] = meas.joint_loadings()

    return StateSpaceForm(
        transition=transition,
        input=inp,
        meas=h,
        state_noise_cov=dyn.joint_state_cov(),
        obs_noise_cov=np.diag(meas.joint_obs_var()),
        m=m, l=l, order=order,
    )


@dataclass
class FilterResult:
    means: np.ndarray       # (T, dim) filtered E[alpha(t) | z(1..t)]
    covs: np.ndarray        # (T, dim, dim)
    loglik: float
    pred_means: np.ndarray  # (T, dim) one-step predictions
    pred_covs: np.ndarray


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def kalman_filter(ss: StateSpaceForm, data: np.ndarray, init_mean, init_cov) -> FilterResult:
    """Forward recursion with Joseph-form updates.

    ``data`` is (T, n); NaN entries are treated as missing and their
    measurement rows skipped.  Returns filtered moments, one-step predictive
    moments and the Gaussian prediction-error log-likelihood.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n_t, n = data.shape
    dim = ss.state_dim
    if n != ss.obs_dim:
        raise DimensionMismatch(f"data has {n} columns, system expects {ss.obs_dim}")
    phi = ss.transition
    h_full = ss.meas
    r_full = ss.obs_noise_cov
    q_state = ss.state_noise_full()

    a = np.atleast_1d(np.asarray(init_mean, dtype=float)).copy()
    p = _symmetrize(np.atleast_2d(np.asarray(init_cov, dtype=float)).copy())
    if a.shape != (dim,) or p.shape != (dim, dim):
        raise DimensionMismatch("initial state moments have wrong shape")

    means = np.empty((n_t, dim))
    covs = np.empty((n_t, dim, dim))
    pred_means = np.empty((n_t, dim))
    pred_covs = np.empty((n_t, dim, dim))
    loglik = 0.0
    eye = np.eye(dim)

    complete = bool(np.all(np.isfinite(data)))

    for t in range(n_t):
        a_pred = phi @ a
        p_pred = _symmetrize(phi @ p @ phi.T + q_state)
        pred_means[t] = a_pred
        pred_covs[t] = p_pred

        if complete:
            h, r, z = h_full, r_full, data[t]
        else:
            mask = np.isfinite(data[t])
            if not mask.any():
                a, p = a_pred, p_pred
                means[t], covs[t] = a, p
                continue
            h = h_full[mask]
            r = r_full[np.ix_(mask, mask)]
            z = data[t, mask]

        v = z - h @ a_pred
        pht = p_pred @ h.T
        s = _symmetrize(h @ pht + r)
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError as exc:
            raise InnovationCovSingular(f"innovation covariance singular at t={t}") from exc
        rhs = np.empty((len(v), dim + 1))
        rhs[:, 0] = v
        rhs[:, 1:] = pht.T
        sol = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True,
                                                        check_finite=False),
                               lower=False, check_finite=False)
        sinv_v = sol[:, 0]
        gain = sol[:, 1:].T
        a = a_pred + gain @ v
        ikh = eye - gain @ h
        p = _symmetrize(ikh @ p_pred @ ikh.T + gain @ r @ gain.T)
        loglik -= 0.5 * (len(v) * LOG_2PI + 2.0 * np.log(np.diag(chol)).sum() + v @ sinv_v)
        means[t], covs[t] = a, p

    if not np.isfinite(loglik):
        raise InnovationCovSingular("log-likelihood is not finite")
    return FilterResult(means, covs, float(loglik), pred_means, pred_covs)


def _backward_gain(p_filt: np.ndarray, phi: np.ndarray, p_pred_next: np.ndarray) -> np.ndarray:
    """J_t = P_t Phi' P_pred(t+1)^{-1} via a symmetric solve."""
    return np.linalg.solve(p_pred_next, phi @ p_filt).T


def kalman_smoother(ss: StateSpaceForm, data: np.ndarray, init) -> SmootherResult:
    """Rauch-Tung-Striebel pass over the filter output."""
    filt = kalman_filter(ss, data, init[0], init[1])
    return smooth_from_filter(ss, filt)


def smooth_from_filter(ss: StateSpaceForm, filt: FilterResult) -> SmootherResult:
    n_t = filt.means.shape[0]
    phi = ss.transition
    means = filt.means.copy()
    covs = filt.covs.copy()
    for t in range(n_t - 2, -1, -1):
        gain = _backward_gain(filt.covs[t], phi, filt.pred_covs[t + 1])
        means[t] = filt.means[t] + gain @ (means[t + 1] - filt.pred_means[t + 1])
        covs[t] = _symmetrize(filt.covs[t] + gain @ (covs[t + 1] - filt.pred_covs[t + 1]) @ gain.T)
    return SmootherResult(means, covs)


def _draw_gaussian(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, cov) tolerating (near-)singular covariances."""
    z = rng.standard_normal(mean.shape[0])
    try:
        return mean + np.linalg.cholesky(cov) @ z
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(_symmetrize(cov))
        return mean + vecs @ (np.sqrt(np.clip(vals, 0.0, None)) * z)


def ffbs_states(ss: StateSpaceForm, data: np.ndarray, init,
                rng: np.random.Generator) -> np.ndarray:
    """Joint draw of the full companion state path given the data.

    Forward filter, then backward sampling.  For companion layouts
    (``ss.order > 1``, identity shift blocks as built by
    :func:`assemble_companion`) the conditional of the state given its
    successor is degenerate everywhere except the oldest register block, so
    only that block is sampled and the rest copied -- exact and much cheaper
    than sampling the full conditional.  Equal seeds give bit-identical
    draws.
    """
    filt = kalman_filter(ss, data, init[0], init[1])
    n_t = filt.means.shape[0]
    phi = ss.transition
    dim = ss.state_dim
    k = ss.m + ss.l
    shared = dim - k  # coordinates of alpha(t) that alpha(t+1) pins down
    draw = np.empty_like(filt.means)
    draw[n_t - 1] = _draw_gaussian(filt.means[n_t - 1], filt.covs[n_t - 1], rng)
    for t in range(n_t - 2, -1, -1):
        p_filt = filt.covs[t]
        resid = draw[t + 1] - filt.pred_means[t + 1]
        # gain rows for the sampled block only: solve with k right-hand sides
        cross = phi @ p_filt[:, shared:]          # cov(alpha(t+1), last block)
        gain_last = np.linalg.solve(filt.pred_covs[t + 1], cross).T
        mean_last = filt.means[t, shared:] + gain_last @ resid
        cov_last = p_filt[shared:, shared:] - gain_last @ cross
        if shared:
            draw[t, :shared] = draw[t + 1, k:]
        draw[t, shared:] = _draw_gaussian(mean_last, cov_last, rng)
    return draw


def ffbs_draw(ss: StateSpaceForm, data: np.ndarray, init,
              rng: np.random.Generator) -> FactorPath:
    """FFBS draw reduced to the current-period factor block d(t)."""
    states = ffbs_states(ss, data, init, rng)
    return FactorPath(values=states[:, :ss.m + ss.l], m=ss.m)


def spectral_radius(transition: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(transition))))


def simulate_measurements(meas: MeasurementModel, dyn: FactorDynamics, n_periods: int,
                          rng: np.random.Generator, burn_in: int = None,
                          init_factors: np.ndarray = None) -> tuple:
    """Simulate observations and the true factor path from the model equations.

    Returns (z, path) with z of shape (T, n).  For stationary dynamics a
    burn-in stretch (default 200 periods) is simulated and discarded; unit
    roots or explosive configurations start at the supplied (or zero)
    initial lags instead.
    """
    m, l = dyn.m, dyn.l
    k = m + l
    order = dyn.order
    blocks = dyn.companion_blocks(order)

    if burn_in is None:
        comp = assemble_companion(dyn, meas)
        burn_in = 200 if spectral_radius(comp.transition) < 1.0 - 1e-8 else 0

    total = n_periods + burn_in
    chol_endo = _psd_factor(dyn.state_cov_endo)
    chol_exo = _psd_factor(dyn.state_cov_exo)
    shocks = rng.standard_normal((total, k))
    shocks[:, :m] = shocks[:, :m] @ chol_endo.T
    shocks[:, m:] = shocks[:, m:] @ chol_exo.T

    lagbuf = np.zeros((order, k))
    if init_factors is not None:
        init_factors = np.atleast_2d(np.asarray(init_factors, dtype=float))
        lagbuf[:init_factors.shape[0]] = init_factors[::-1][:order]

    path = np.empty((total, k))
    for t in range(total):
        d = shocks[t].copy()
        for i, blk in enumerate(blocks):
            d += blk @ lagbuf[i]
        if not np.all(np.isfinite(d)) or np.max(np.abs(d)) > 1e12:
            raise NonFiniteSample(f"factor simulation overflow at step {t}")
        path[t] = d
        if order > 1:
            lagbuf[1:] = lagbuf[:-1]
        lagbuf[0] = d

    path = path[burn_in:]
    g = path[:, :m]
    f = path[:, m:]
    y = meas.mean_y + g @ meas.loadings_y.T \
        + rng.standard_normal((n_periods, meas.n_obs_y)) * np.sqrt(meas.obs_var_y)
    x = meas.mean_x + f @ meas.loadings_x.T \
        + rng.standard_normal((n_periods, meas.n_obs_x)) * np.sqrt(meas.obs_var_x)
    z = np.hstack([y, x])
    if not np.all(np.isfinite(z)):
        raise NonFiniteSample("simulated observations are not finite")
    return z, FactorPath(values=path, m=m)


def simulate(params, n_periods: int, rng: np.random.Generator, adjacency,
             site_ids=None, start_period: str = "1984Q1"):
    """Simulate a full panel dataset from model parameters.

    ``params`` is an SdSemParams instance; returns (PanelDataset, FactorPath)
    where the path is the ground truth used to generate the data.
    """
    from .data import PanelDataset, make_periods

    meas = params.meas
    dyn = params.dynamics()
    z, path = simulate_measurements(meas, dyn, n_periods, rng)
    n_sites = adjacency.n_sites
    n_y = meas.n_obs_y // n_sites
    n_x = meas.n_obs_x // n_sites
    if site_ids is None:
        site_ids = [f"s{i:02d}" for i in range(n_sites)]
    periods = make_periods(start_period, n_periods)
    return PanelDataset(
        sites=list(site_ids),
        periods=periods,
        y=z[:, :meas.n_obs_y].T.copy(),
        x=z[:, meas.n_obs_y:].T.copy(),
        adjacency=adjacency,
        n_vars_y=n_y,
        n_vars_x=n_x,
    ), path
