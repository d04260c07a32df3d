"""Posterior sampling for the spatial dynamic factor model.

One Gibbs sweep updates, in order: the latent factor path (FFBS on the
companion form implied by the current error-correction blocks), the loading
columns and their GMRF mean coefficients, the GMRF hyperparameters
(Metropolis-Hastings), the observation precisions, the error-correction
coefficients, the state-noise factors, the variable-selection indicators and
the series means.  Factors go first so that every other conditional stays
Gaussian or Gamma.

Identification fixes the anchor rows of each loading matrix to a lower
triangular block with positive diagonal; a negative diagonal draw flips the
whole column together with its factor path and every coefficient referencing
that factor, which leaves the posterior density invariant.

The FFBS runs on collapsed observations: the stacked panel is projected onto
the factor space through the generalized least squares map implied by the
loadings, which is a sufficient reduction and cuts the innovation dimension
from the panel size to the factor count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import multigammaln

from .ecm import EcmBlocks
from .errors import (
    ChainDiverged,
    DimensionMismatch,
    EmptyChain,
    EmptyCluster,
    FactorizationFailure,
    NotPositiveDefinite,
    SingularObsCov,
    ZeroWithinVariance,
)
from .lattice import (
    GmrfSpec,
    _inner_interaction,
    build_joint_precision,
    constant_mean_design,
    sym_sqrt,
)
from .params import (
    AnchorSet,
    PriorConfig,
    SdSemParams,
    SsvsState,
    apply_anchor_structure,
)
from .state_space import (
    FactorPath,
    MeasurementModel,
    StateSpaceForm,
    assemble_companion,
    ffbs_states,
)

PD_TOL = 1e-10
VARIANCE_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# small sampling / density helpers

def _draw_gaussian_canonical(prec: np.ndarray, pot: np.ndarray,
                             rng: np.random.Generator) -> np.ndarray:
    """Draw from the Gaussian with precision ``prec`` and potential ``pot``."""
    if prec.shape[0] == 0:
        return np.zeros(0)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure(f"conditional precision not PD: {exc}") from exc
    mean = solve_triangular(chol.T, solve_triangular(chol, pot, lower=True,
                                                     check_finite=False),
                            lower=False, check_finite=False)
    z = rng.standard_normal(pot.shape[0])
    return mean + solve_triangular(chol.T, z, lower=False, check_finite=False)


def sample_wishart(rng: np.random.Generator, df: float, scale: np.ndarray) -> np.ndarray:
    """Bartlett-decomposition Wishart draw with the given scale matrix."""
    d = scale.shape[0]
    chol = np.linalg.cholesky(scale)
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = np.sqrt(rng.chisquare(df - i))
        for j in range(i):
            a[i, j] = rng.standard_normal()
    la = chol @ a
    return la @ la.T


def wishart_logpdf(x: np.ndarray, df: float, scale: np.ndarray) -> float:
    d = x.shape[0]
    sign_x, logdet_x = np.linalg.slogdet(x)
    sign_s, logdet_s = np.linalg.slogdet(scale)
    if sign_x <= 0 or sign_s <= 0:
        return -np.inf
    tr = np.trace(np.linalg.solve(scale, x))
    return (0.5 * (df - d - 1) * logdet_x - 0.5 * tr - 0.5 * df * d * np.log(2.0)
            - 0.5 * df * logdet_s - multigammaln(0.5 * df, d))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _upper_cholesky(mat: np.ndarray) -> np.ndarray:
    """Upper-triangular U with U U' = mat."""
    rev = np.linalg.cholesky(mat[::-1, ::-1])
    return rev[::-1, ::-1]


# ---------------------------------------------------------------------------
# chain containers

@dataclass
class ChainMeta:
    iterations: int
    burn_in: int
    thinning: int
    seed: object
    chain_id: int = 0
    anchors: AnchorSet = None
    acceptance: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class PosteriorDraws:
    """Thinned chain of parameter draws with their factor paths."""

    params: list
    factors: list
    meta: ChainMeta
    deviances: np.ndarray = None

    @property
    def n_draws(self) -> int:
        return len(self.params)


@dataclass
class SpikeSlabScales:
    """Per-coefficient spike and slab variances from the preliminary run."""

    longrun_spike: np.ndarray
    longrun_slab: np.ndarray
    shortrun_spike: np.ndarray
    shortrun_slab: np.ndarray
    shortrun_exo_spike: np.ndarray
    shortrun_exo_slab: np.ndarray


def scales_from_variances(variances: dict, prior: PriorConfig) -> SpikeSlabScales:
    """Spike/slab scales from preliminary-run variance estimates (floored)."""
    out = {}
    for name in ("longrun", "shortrun", "shortrun_exo"):
        var = np.maximum(np.asarray(variances[name], dtype=float), VARIANCE_FLOOR)
        out[f"{name}_spike"] = prior.ssvs_spike_mult * var
        out[f"{name}_slab"] = prior.ssvs_slab_mult * var
    return SpikeSlabScales(**out)


# ---------------------------------------------------------------------------
# likelihood summaries and diagnostics

def deviance(params: SdSemParams, z: np.ndarray, factors: FactorPath) -> float:
    """Minus twice the Gaussian log-likelihood of the panel given the factors."""
    meas = params.meas
    obs_var = meas.joint_obs_var()
    if np.any(obs_var <= 0):
        raise SingularObsCov("observation variances must be strictly positive")
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n_t, n = z.shape
    resid = z - meas.joint_mean() - factors.values @ meas.joint_loadings().T
    sse = (resid ** 2).sum(axis=0)
    return float(n_t * n * np.log(2.0 * np.pi) + n_t * np.log(obs_var).sum()
                 + (sse / obs_var).sum())


def gelman_rubin(chains) -> float:
    """Potential scale reduction over two or more equal-length scalar chains."""
    arrays = [np.asarray(c, dtype=float).ravel() for c in chains]
    if len(arrays) < 2:
        raise DimensionMismatch("need at least two chains")
    n = arrays[0].shape[0]
    if n < 2 or any(a.shape[0] != n for a in arrays):
        raise DimensionMismatch("chains must share a common length of at least 2")
    within = float(np.mean([a.var(ddof=1) for a in arrays]))
    if within == 0.0:
        raise ZeroWithinVariance("all chains are constant")
    means = np.array([a.mean() for a in arrays])
    between_over_n = means.var(ddof=1)
    return float(np.sqrt(((n - 1) / n * within + between_over_n) / within))


def select_anchor_states(data, m: int, l: int, rng: np.random.Generator,
                         max_attempts: int = 5) -> AnchorSet:
    """Choose identification anchor rows by clustering the site series.

    K-means is run on the response rows for m clusters and on the predictor
    rows for l clusters.  Within a cluster the anchor is the row with an
    unused region label (when labels exist) and the highest series mean; ties
    fall to the candidate farthest from the anchors already chosen.  For the
    predictor block, rows belonging to sites already anchoring the response
    are preferred.
    """
    if m > data.n_sites * data.n_vars_y or l > data.n_sites * data.n_vars_x:
        raise DimensionMismatch("more anchors requested than available rows")
    regions = data.regions

    def row_regions(n_vars):
        if regions is None:
            return None
        return [regions[r // n_vars] for r in range(data.n_sites * n_vars)]

    y_rows = _anchor_rows(data.y, m, row_regions(data.n_vars_y), rng,
                          prefer_rows=None, max_attempts=max_attempts)
    prefer_sites = {r // data.n_vars_y for r in y_rows}
    prefer_x = {r for r in range(data.n_sites * data.n_vars_x)
                if r // data.n_vars_x in prefer_sites}
    x_rows = _anchor_rows(data.x, l, row_regions(data.n_vars_x), rng,
                          prefer_rows=prefer_x, max_attempts=max_attempts)
    return AnchorSet(y_rows=y_rows, x_rows=x_rows)


def _anchor_rows(series, k, row_regions, rng, prefer_rows, max_attempts):
    series = np.asarray(series, dtype=float)
    if k == series.shape[0]:
        labels = np.arange(k)
    else:
        labels = None
        for _ in range(max_attempts):
            try:
                _, labels = kmeans2(series, k, minit="++", rng=rng, missing="raise")
                break
            except Exception:
                labels = None
        if labels is None:
            raise EmptyCluster(f"k-means failed to fill {k} clusters")
    row_means = series.mean(axis=1)
    cluster_order = sorted(range(k),
                           key=lambda c: -row_means[labels == c].mean())
    chosen = []
    used_regions = set()
    for c in cluster_order:
        candidates = np.flatnonzero(labels == c)
        pool = candidates
        if row_regions is not None:
            fresh = [r for r in candidates if row_regions[r] not in used_regions]
            if fresh:
                pool = np.asarray(fresh)
        if prefer_rows:
            preferred = [r for r in pool if r in prefer_rows]
            if preferred:
                pool = np.asarray(preferred)
        best = pool[np.argmax(row_means[pool])]
        near_ties = pool[np.abs(row_means[pool] - row_means[best]) < 1e-12]
        if len(near_ties) > 1 and chosen:
            dists = [min(np.linalg.norm(series[r] - series[a]) for a in chosen)
                     for r in near_ties]
            best = near_ties[int(np.argmax(dists))]
        chosen.append(int(best))
        if row_regions is not None:
            used_regions.add(row_regions[best])
    return chosen


# ---------------------------------------------------------------------------
# sampler state

@dataclass
class MhTuning:
    """Random-walk step sizes and acceptance bookkeeping per loading column."""

    step_y: np.ndarray
    step_x: np.ndarray
    window_accept: dict = field(default_factory=dict)
    window_total: dict = field(default_factory=dict)
    accept: dict = field(default_factory=dict)
    total: dict = field(default_factory=dict)

    def record(self, key, accepted):
        self.window_accept[key] = self.window_accept.get(key, 0) + int(accepted)
        self.window_total[key] = self.window_total.get(key, 0) + 1
        self.accept[key] = self.accept.get(key, 0) + int(accepted)
        self.total[key] = self.total.get(key, 0) + 1

    def adapt(self, prior: PriorConfig):
        for key, total in self.window_total.items():
            if total == 0 or not key.startswith("coef"):
                continue
            rate = self.window_accept.get(key, 0) / total
            _, which, j = key.split(".")
            steps = self.step_y if which == "y" else self.step_x
            if rate > prior.mh_accept_high:
                steps[int(j)] *= 1.2
            elif rate < prior.mh_accept_low:
                steps[int(j)] /= 1.2
        self.window_accept.clear()
        self.window_total.clear()

    def rates(self) -> dict:
        return {k: self.accept[k] / max(1, self.total[k]) for k in sorted(self.total)}


@dataclass
class SamplerState:
    """Everything one Gibbs sweep reads and writes."""

    params: SdSemParams
    factors: FactorPath
    anchors: AnchorSet
    adjacency: object
    z: np.ndarray
    prior: PriorConfig
    order: int
    ssvs_enabled: bool = True
    prior_only: bool = False
    diagonal_state_noise: bool = True
    mh: MhTuning = None
    state_offdiag_include_endo: np.ndarray = None
    state_offdiag_include_exo: np.ndarray = None

    @property
    def n_periods(self) -> int:
        return self.z.shape[0]

    def zero_mask(self, which: str) -> np.ndarray:
        meas = self.params.meas
        if which == "y":
            return self.anchors.fixed_zero_mask_y(meas.n_obs_y, meas.n_factors_y)
        return self.anchors.fixed_zero_mask_x(meas.n_obs_x, meas.n_factors_x)

    def longrun_prior_var(self) -> np.ndarray:
        ecm = self.params.ecm
        size = (ecm.adjust_joint.size + ecm.adjust_cross.size + ecm.adjust_exo.size)
        if self.ssvs_enabled and self.params.ssvs is not None \
                and self.params.ssvs.longrun_spike.size == size:
            return self.params.ssvs.longrun_var()
        return np.full(size, self.prior.preliminary_prior_var)

    def shortrun_prior_var(self) -> np.ndarray:
        ecm = self.params.ecm
        size = sum(k.size for k in ecm.shortrun_endo)
        if self.ssvs_enabled and self.params.ssvs is not None \
                and self.params.ssvs.shortrun_spike.size == size:
            return self.params.ssvs.shortrun_var()
        return np.full(size, self.prior.preliminary_prior_var)

    def shortrun_exo_prior_var(self) -> np.ndarray:
        ecm = self.params.ecm
        size = sum(k.size for k in ecm.shortrun_exo)
        if self.ssvs_enabled and self.params.ssvs is not None \
                and self.params.ssvs.shortrun_exo_spike.size == size:
            return self.params.ssvs.shortrun_exo_var()
        return np.full(size, self.prior.preliminary_prior_var)


# ---------------------------------------------------------------------------
# step 1: latent factors

def _collapsed_system(ss: StateSpaceForm, meas: MeasurementModel):
    """Project the panel onto the factor space (sufficient GLS reduction)."""
    hbar = meas.joint_loadings()
    obs_prec = 1.0 / meas.joint_obs_var()
    c = hbar.T @ (hbar * obs_prec[:, None])
    try:
        chol = np.linalg.cholesky(0.5 * (c + c.T))
    except np.linalg.LinAlgError:
        return None
    c_inv = solve_triangular(chol.T, solve_triangular(
        chol, np.eye(c.shape[0]), lower=True, check_finite=False),
        lower=False, check_finite=False)
    c_inv = 0.5 * (c_inv + c_inv.T)
    k = c.shape[0]
    meas_mat = np.zeros((k, ss.state_dim))
    meas_mat[:, :k] = np.eye(k)
    collapsed = StateSpaceForm(
        transition=ss.transition, input=ss.input, meas=meas_mat,
        state_noise_cov=ss.state_noise_cov, obs_noise_cov=c_inv,
        m=ss.m, l=ss.l, order=ss.order)
    projector = (obs_prec[:, None] * hbar) @ c_inv
    return collapsed, projector


def sample_factors(state: SamplerState, rng: np.random.Generator) -> FactorPath:
    """Joint FFBS draw of the factor path given all parameters."""
    meas = state.params.meas
    ss = assemble_companion(state.params.dynamics(), meas)
    init = state.prior.init_state(ss.state_dim)
    if state.prior_only:
        path = _simulate_prior_path(state, ss, init, rng)
    else:
        z0 = state.z - meas.joint_mean()
        collapsed = _collapsed_system(ss, meas)
        if collapsed is None:
            states = ffbs_states(ss, z0, init, rng)
        else:
            ss_c, projector = collapsed
            states = ffbs_states(ss_c, z0 @ projector, init, rng)
        path = FactorPath(values=states[:, :ss.m + ss.l], m=ss.m)
    state.factors = path
    return path


def _simulate_prior_path(state, ss, init, rng):
    k = ss.m + ss.l
    alpha = init[0] + np.sqrt(np.diag(init[1])) * rng.standard_normal(ss.state_dim)
    lagbuf = alpha.reshape(ss.order, k)
    chol = _psd_sqrt(ss.state_noise_cov)
    blocks = [ss.transition[:k, i * k:(i + 1) * k] for i in range(ss.order)]
    path = np.empty((state.n_periods, k))
    for t in range(state.n_periods):
        d = chol @ rng.standard_normal(k)
        for i, blk in enumerate(blocks):
            d += blk @ lagbuf[i]
        path[t] = d
        if ss.order > 1:
            lagbuf[1:] = lagbuf[:-1]
        lagbuf[0] = d
    return FactorPath(values=path, m=ss.m)


# ---------------------------------------------------------------------------
# step 2: loadings and GMRF mean coefficients

def sample_loadings(state: SamplerState, rng: np.random.Generator) -> None:
    """Column-wise Gaussian update of both loading matrices plus their means.

    Each column combines its GMRF prior precision with the diagonal
    regression likelihood; identification zeros are conditioned out exactly
    and a negative anchor diagonal triggers a full sign flip of the factor.
    """
    _update_loading_block(state, "y", rng)
    _update_loading_block(state, "x", rng)


def _update_loading_block(state, which, rng):
    meas = state.params.meas
    if which == "y":
        panel = state.z[:, :meas.n_obs_y]
        fac = state.factors.values[:, :meas.n_factors_y]
        loadings = meas.loadings_y
        mu, obs_var = meas.mean_y, meas.obs_var_y
        specs = state.params.gmrf_y
    else:
        panel = state.z[:, meas.n_obs_y:]
        fac = state.factors.values[:, meas.n_factors_y:]
        loadings = meas.loadings_x
        mu, obs_var = meas.mean_x, meas.obs_var_x
        specs = state.params.gmrf_x
    anchor_rows = state.anchors.y_rows if which == "y" else state.anchors.x_rows
    zero_mask = state.zero_mask(which)
    resid = panel - mu - fac @ loadings.T
    n_rows, n_cols = loadings.shape
    for j in range(n_cols):
        fac_j = fac[:, j].copy()
        resid += np.outer(fac_j, loadings[:, j])
        joint = build_joint_precision(state.adjacency, specs[j])
        q = joint.dense_precision()
        pot = q @ joint.mean
        lik_prec = np.zeros(n_rows)
        if not state.prior_only:
            sgg = fac_j @ fac_j
            lik_prec = sgg / obs_var
            pot = pot + (resid.T @ fac_j) / obs_var
        free = ~zero_mask[:, j]
        prec_ff = q[np.ix_(free, free)].copy()
        prec_ff[np.diag_indices_from(prec_ff)] += lik_prec[free]
        col = np.zeros(n_rows)
        col[free] = _draw_gaussian_canonical(prec_ff, pot[free], rng)
        loadings[:, j] = col
        if j < len(anchor_rows) and loadings[anchor_rows[j], j] < 0:
            _flip_factor(state, which, j)
        resid -= np.outer(fac[:, j], loadings[:, j])
        _update_mean_coef(specs[j], loadings[:, j], q, state.prior, rng)


def _update_mean_coef(spec: GmrfSpec, column, q, prior: PriorConfig, rng):
    design = spec.mean_design
    prec = design.T @ q @ design + np.eye(design.shape[1]) / prior.loading_mean_var
    pot = design.T @ (q @ column)
    spec.mean_coef = _draw_gaussian_canonical(prec, pot, rng)


def _flip_factor(state: SamplerState, which: str, j: int) -> None:
    """Relabel factor j with the opposite sign everywhere it appears."""
    p = state.params
    ecm = p.ecm
    m = p.m
    if which == "y":
        p.meas.loadings_y[:, j] *= -1.0
        p.gmrf_y[j].mean_coef = -p.gmrf_y[j].mean_coef
        state.factors.values[:, j] *= -1.0
        ecm.adjust_joint[j, :] *= -1.0       # equation j flips
        ecm.coint_joint_endo[j, :] *= -1.0   # regressor g_j flips
        ecm.adjust_cross[j, :] *= -1.0
        for k in ecm.shortrun_endo:
            k[j, :] *= -1.0
            k[:, j] *= -1.0
        if not state.diagonal_state_noise:
            p.prec_factor_endo = _flip_prec_factor(p.prec_factor_endo, j)
    else:
        p.meas.loadings_x[:, j] *= -1.0
        p.gmrf_x[j].mean_coef = -p.gmrf_x[j].mean_coef
        state.factors.values[:, m + j] *= -1.0
        ecm.coint_joint_exo[j, :] *= -1.0    # regressor f_j flips
        ecm.adjust_exo[j, :] *= -1.0         # exogenous equation j flips
        ecm.coint_exo[j, :] *= -1.0
        for k in ecm.shortrun_endo:
            k[:, m + j] *= -1.0
        for k in ecm.shortrun_exo:
            k[j, :] *= -1.0
            k[:, j] *= -1.0
        if not state.diagonal_state_noise:
            p.prec_factor_exo = _flip_prec_factor(p.prec_factor_exo, j)


def _flip_prec_factor(factor, j):
    prec = factor @ factor.T
    prec[j, :] *= -1.0
    prec[:, j] *= -1.0
    return _upper_cholesky(prec)


# ---------------------------------------------------------------------------
# step 3: GMRF hyperparameters via Metropolis-Hastings

def _gmrf_hyper_logtarget(state, which, j, prec, coef_reparam):
    """Log density of (conditional precision, spatial coefficient) given the column.

    Returns -inf when the implied joint precision is not positive definite,
    which realizes the rejection penalty for invalid proposals.
    """
    meas = state.params.meas
    prior = state.prior
    specs = state.params.gmrf_y if which == "y" else state.params.gmrf_x
    column = (meas.loadings_y if which == "y" else meas.loadings_x)[:, j]
    spec = specs[j]
    n_sites = state.adjacency.n_sites
    inner = _inner_interaction(state.adjacency, coef_reparam)
    vals = np.linalg.eigvalsh(inner)
    if vals[0] <= PD_TOL:
        return -np.inf
    sign, logdet_inner = np.linalg.slogdet(inner)
    sign_p, logdet_prec = np.linalg.slogdet(prec)
    if sign_p <= 0:
        return -np.inf
    half = _psd_sqrt(prec)  # (cond cov)^{-1/2}
    u = (column - spec.mean).reshape(n_sites, -1) @ half
    v = u.reshape(-1)
    quad = v @ inner @ v
    df = prior.wishart_df_y if which == "y" else prior.wishart_df_x
    dim = coef_reparam.shape[0]
    prior_scale = np.eye(dim) / (df * prior.wishart_scale)
    logp = 0.5 * (n_sites * logdet_prec + logdet_inner) - 0.5 * quad
    logp += wishart_logpdf(prec, df, prior_scale)
    logp -= float((coef_reparam ** 2).sum()) / prior.gmrf_coef_scale ** 2
    return logp


def try_coef_proposal(state, which, j, proposal, rng) -> bool:
    """MH accept/reject for a spatial-coefficient proposal; True if accepted."""
    specs = state.params.gmrf_y if which == "y" else state.params.gmrf_x
    spec = specs[j]
    prec = np.linalg.inv(spec.cond_cov)
    cur = spec.spatial_coef_reparam
    log_new = _gmrf_hyper_logtarget(state, which, j, prec, proposal)
    if not np.isfinite(log_new):
        return False
    log_old = _gmrf_hyper_logtarget(state, which, j, prec, cur)
    if np.log(rng.random()) < log_new - log_old:
        specs[j] = GmrfSpec.from_reparam(spec.cond_cov, proposal,
                                         spec.mean_design, spec.mean_coef)
        return True
    return False


def try_precision_proposal(state, which, j, proposal, rng) -> bool:
    """MH step for the conditional precision with a Wishart proposal."""
    specs = state.params.gmrf_y if which == "y" else state.params.gmrf_x
    spec = specs[j]
    cur = np.linalg.inv(spec.cond_cov)
    coef = spec.spatial_coef_reparam
    nu = state.prior.mh_wishart_df
    log_new = _gmrf_hyper_logtarget(state, which, j, proposal, coef)
    if not np.isfinite(log_new):
        return False
    log_old = _gmrf_hyper_logtarget(state, which, j, cur, coef)
    log_q_fwd = wishart_logpdf(proposal, nu, cur / nu)
    log_q_rev = wishart_logpdf(cur, nu, proposal / nu)
    if np.log(rng.random()) < log_new - log_old + log_q_rev - log_q_fwd:
        cond_cov = np.linalg.inv(proposal)
        specs[j] = GmrfSpec.from_reparam(0.5 * (cond_cov + cond_cov.T), coef,
                                         spec.mean_design, spec.mean_coef)
        return True
    return False


def sample_gmrf_hypers(state: SamplerState, rng: np.random.Generator) -> None:
    """One MH sweep over every loading column's (precision, coefficient) pair."""
    for which, steps in (("y", state.mh.step_y), ("x", state.mh.step_x)):
        specs = state.params.gmrf_y if which == "y" else state.params.gmrf_x
        for j, spec in enumerate(specs):
            cur = spec.spatial_coef_reparam
            proposal = cur + steps[j] * rng.standard_normal(cur.shape)
            accepted = try_coef_proposal(state, which, j, proposal, rng)
            state.mh.record(f"coef.{which}.{j}", accepted)

            cur_prec = np.linalg.inv(specs[j].cond_cov)
            nu = state.prior.mh_wishart_df
            prec_prop = sample_wishart(rng, nu, cur_prec / nu)
            accepted = try_precision_proposal(state, which, j, prec_prop, rng)
            state.mh.record(f"prec.{which}.{j}", accepted)


# ---------------------------------------------------------------------------
# steps 4 and 8: observation precisions and series means

def sample_obs_precisions(state: SamplerState, rng: np.random.Generator) -> None:
    """Conjugate Gamma update of the diagonal observation precisions."""
    meas = state.params.meas
    prior = state.prior
    n = meas.n_obs_y + meas.n_obs_x
    if state.prior_only:
        t_eff, sse = 0, np.zeros(n)
    else:
        resid = (state.z - meas.joint_mean()
                 - state.factors.values @ meas.joint_loadings().T)
        t_eff = state.n_periods
        sse = (resid ** 2).sum(axis=0)
    prec = rng.gamma(prior.obs_precision_shape + 0.5 * t_eff,
                     1.0 / (prior.obs_precision_rate + 0.5 * sse))
    prec = np.maximum(prec, 1e-12)  # tiny-shape gamma draws can underflow to 0
    meas.obs_var_y = 1.0 / prec[:meas.n_obs_y]
    meas.obs_var_x = 1.0 / prec[meas.n_obs_y:]


def sample_means(state: SamplerState, rng: np.random.Generator) -> None:
    meas = state.params.meas
    prior_prec = 1.0 / state.prior.mean_prior_var
    if state.prior_only:
        draw = rng.standard_normal(meas.n_obs_y + meas.n_obs_x) / np.sqrt(prior_prec)
    else:
        resid = state.z - state.factors.values @ meas.joint_loadings().T
        obs_prec = 1.0 / meas.joint_obs_var()
        post_prec = state.n_periods * obs_prec + prior_prec
        post_mean = resid.sum(axis=0) * obs_prec / post_prec
        draw = post_mean + rng.standard_normal(post_mean.shape) / np.sqrt(post_prec)
    meas.mean_y = draw[:meas.n_obs_y]
    meas.mean_x = draw[meas.n_obs_y:]


# ---------------------------------------------------------------------------
# step 5: error-correction coefficients

def _ecm_design(state: SamplerState):
    vals = state.factors.values
    order = state.order
    n_t = vals.shape[0]
    diffs = np.diff(vals, axis=0)
    lvl = vals[order - 1:n_t - 1]
    target = diffs[order - 1:]
    lag_list = [diffs[order - 1 - i:n_t - 1 - i] for i in range(1, order)]
    return lvl, target, lag_list


def _draw_coef_matrix(y, x, noise_prec, prior_var, rng):
    """Draw C in Y = X C' + E with row noise precision ``noise_prec``.

    The prior stacks the rows of C: vec_row(C) ~ N(0, diag(prior_var)).
    """
    k_out = noise_prec.shape[0]
    k_reg = x.shape[1]
    gram = x.T @ x
    prec = np.kron(noise_prec, gram)
    prec[np.diag_indices_from(prec)] += 1.0 / prior_var
    pot = (noise_prec @ (y.T @ x)).ravel()
    theta = _draw_gaussian_canonical(prec, pot, rng)
    return theta.reshape(k_out, k_reg)


def sample_ecm_coeffs(state: SamplerState, rng: np.random.Generator) -> EcmBlocks:
    """Gibbs pass over the error-correction blocks in non-identified coordinates.

    Adjustment blocks carry the spike/slab prior; cointegration vectors have
    a standard Gaussian prior.  The symmetric mixing matrices recording the
    non-identified rotation are refreshed from the adjustment Grams.
    """
    p = state.params
    ecm = p.ecm
    m, l = p.m, p.l
    lvl, target, lag_list = _ecm_design(state)
    f_lvl = lvl[:, m:]
    dg, df = target[:, :m], target[:, m:]
    n_eff = lvl.shape[0]
    lag_mat = np.hstack(lag_list) if lag_list else np.zeros((n_eff, 0))
    lagf_mat = np.hstack([ld[:, m:] for ld in lag_list]) if lag_list \
        else np.zeros((n_eff, 0))
    prec_endo = p.prec_factor_endo @ p.prec_factor_endo.T
    prec_exo = p.prec_factor_exo @ p.prec_factor_exo.T
    r_d = ecm.adjust_joint.shape[1]
    r_f = ecm.adjust_exo.shape[1]
    v_long = state.longrun_prior_var()
    n_a, n_a2 = m * r_d, m * r_f

    def short_fit_endo():
        if not ecm.shortrun_endo:
            return 0.0
        return lag_mat @ np.hstack(ecm.shortrun_endo).T

    def short_fit_exo():
        if not ecm.shortrun_exo:
            return 0.0
        return lagf_mat @ np.hstack(ecm.shortrun_exo).T

    def joint_fit():
        return (lvl @ ecm.coint_joint) @ ecm.adjust_joint.T if r_d else 0.0

    def cross_fit():
        return (f_lvl @ ecm.coint_exo) @ ecm.adjust_cross.T if r_f else 0.0

    if r_d:
        w = lvl @ ecm.coint_joint
        resid = dg - cross_fit() - short_fit_endo()
        ecm.adjust_joint = _draw_coef_matrix(resid, w, prec_endo, v_long[:n_a], rng)

        # cointegration vectors: kron-structured Gaussian with N(0, I) prior
        gsmall = ecm.adjust_joint.T @ prec_endo @ ecm.adjust_joint
        prec_mat = np.kron(gsmall, lvl.T @ lvl) + np.eye((m + l) * r_d)
        mm = resid @ (prec_endo @ ecm.adjust_joint)
        pot = (lvl.T @ mm).ravel(order="F")
        theta = _draw_gaussian_canonical(prec_mat, pot, rng)
        bnew = theta.reshape((m + l, r_d), order="F")
        ecm.coint_joint_endo = bnew[:m]
        ecm.coint_joint_exo = bnew[m:]

    if r_f:
        wf = f_lvl @ ecm.coint_exo
        resid_g = dg - joint_fit() - short_fit_endo()
        ecm.adjust_cross = _draw_coef_matrix(
            resid_g, wf, prec_endo, v_long[n_a:n_a + n_a2], rng)
        resid_f = df - short_fit_exo()
        ecm.adjust_exo = _draw_coef_matrix(
            resid_f, wf, prec_exo, v_long[n_a + n_a2:], rng)

        gsmall = (ecm.adjust_cross.T @ prec_endo @ ecm.adjust_cross
                  + ecm.adjust_exo.T @ prec_exo @ ecm.adjust_exo)
        prec_mat = np.kron(gsmall, f_lvl.T @ f_lvl) + np.eye(l * r_f)
        resid_g2 = dg - joint_fit() - short_fit_endo()
        mg = resid_g2 @ (prec_endo @ ecm.adjust_cross)
        mf = resid_f @ (prec_exo @ ecm.adjust_exo)
        pot = (f_lvl.T @ (mg + mf)).ravel(order="F")
        theta = _draw_gaussian_canonical(prec_mat, pot, rng)
        ecm.coint_exo = theta.reshape(l, r_f, order="F")

    if state.order > 1:
        resid_k = dg - joint_fit() - cross_fit()
        c = _draw_coef_matrix(resid_k, lag_mat, prec_endo,
                              state.shortrun_prior_var(), rng)
        ecm.shortrun_endo = [c[:, i * (m + l):(i + 1) * (m + l)]
                             for i in range(state.order - 1)]
        wf_fit = (f_lvl @ ecm.coint_exo) @ ecm.adjust_exo.T if r_f else 0.0
        resid_p = df - wf_fit
        cphi = _draw_coef_matrix(resid_p, lagf_mat, prec_exo,
                                 state.shortrun_exo_prior_var(), rng)
        ecm.shortrun_exo = [cphi[:, i * l:(i + 1) * l]
                            for i in range(state.order - 1)]

    if r_d:
        ecm.mix_joint = _psd_sqrt(ecm.adjust_joint.T @ ecm.adjust_joint)
    if r_f:
        ecm.mix_exo = _psd_sqrt(ecm.adjust_exo.T @ ecm.adjust_exo)
    return ecm


# ---------------------------------------------------------------------------
# step 6: state-noise factors

def _ecm_residuals(state: SamplerState):
    p = state.params
    ecm = p.ecm
    m = p.m
    lvl, target, lag_list = _ecm_design(state)
    f_lvl = lvl[:, m:]
    n_eff = lvl.shape[0]
    fit_g = np.zeros((n_eff, m))
    if ecm.adjust_joint.size:
        fit_g += (lvl @ ecm.coint_joint) @ ecm.adjust_joint.T
    if ecm.adjust_cross.size:
        fit_g += (f_lvl @ ecm.coint_exo) @ ecm.adjust_cross.T
    fit_f = np.zeros((n_eff, p.l))
    if ecm.adjust_exo.size:
        fit_f += (f_lvl @ ecm.coint_exo) @ ecm.adjust_exo.T
    for i, lag in enumerate(lag_list):
        fit_g += lag @ ecm.shortrun_endo[i].T
        fit_f += lag[:, m:] @ ecm.shortrun_exo[i].T
    return target[:, :m] - fit_g, target[:, m:] - fit_f


def sample_state_noise(state: SamplerState, rng: np.random.Generator) -> None:
    """Update the factors of the state-innovation precisions.

    Diagonal mode (default) is a conjugate Gamma update per factor; the
    triangular mode updates one upper-triangular column at a time, Gamma on
    the squared diagonal and Gaussian on the off-diagonals with a fixed
    two-point mixture prior.
    """
    resid_endo, resid_exo = _ecm_residuals(state)
    p = state.params
    p.prec_factor_endo = _draw_prec_factor(
        resid_endo, state, rng, state.state_offdiag_include_endo)
    p.prec_factor_exo = _draw_prec_factor(
        resid_exo, state, rng, state.state_offdiag_include_exo)


def _draw_prec_factor(resid, state, rng, offdiag_include):
    prior = state.prior
    n_eff, dim = resid.shape
    if state.prior_only:
        n_eff = 0
        resid = np.zeros((0, dim))
    if state.diagonal_state_noise:
        sse = (resid ** 2).sum(axis=0)
        prec = rng.gamma(prior.state_precision_shape + 0.5 * n_eff,
                         1.0 / (prior.state_precision_rate + 0.5 * sse))
        return np.diag(np.sqrt(np.maximum(prec, 1e-12)))
    s = resid.T @ resid
    v = np.zeros((dim, dim))
    for j in range(dim):
        if j == 0:
            rate = prior.state_precision_rate + 0.5 * s[0, 0]
            v[0, 0] = np.sqrt(rng.gamma(prior.state_precision_shape + 0.5 * n_eff,
                                        1.0 / rate))
            continue
        s11 = s[:j, :j]
        s1j = s[:j, j]
        d_prior = np.where(offdiag_include[_offdiag_slice(j)] == 1, 1.0, 0.01)
        omega_prec = s11 + np.diag(1.0 / d_prior)
        chol = np.linalg.cholesky(omega_prec)
        tmp = solve_triangular(chol, s1j, lower=True)
        schur = s[j, j] - tmp @ tmp
        rate = prior.state_precision_rate + 0.5 * max(schur, 0.0)
        vjj = np.sqrt(rng.gamma(prior.state_precision_shape + 0.5 * n_eff, 1.0 / rate))
        mean = -vjj * solve_triangular(chol.T, tmp, lower=False)
        w = mean + solve_triangular(chol.T, rng.standard_normal(j), lower=False)
        v[:j, j] = w
        v[j, j] = vjj
    return v


def _offdiag_slice(j):
    start = j * (j - 1) // 2
    return slice(start, start + j)


# ---------------------------------------------------------------------------
# scale interweaving: Metropolis moves along the factor/loading scale orbit
#
# The likelihood is exactly invariant under (column * c, factor / c) with the
# dependent coefficients adjusted, so each move is accepted on the ratio of
# the scale-variant prior and state-equation terms times the map Jacobian.
# Without these moves the scale mixes only through a slow random walk.

def _matrix_normal_loglike(resid, prec_factor):
    n_eff = resid.shape[0]
    logdet_half = float(np.log(np.abs(np.diag(prec_factor))).sum())
    white = resid @ prec_factor
    return n_eff * logdet_half - 0.5 * float((white ** 2).sum())


def _loading_column_logprior(state, which, j):
    """GMRF log density of the free entries given the anchored zeros."""
    meas = state.params.meas
    specs = state.params.gmrf_y if which == "y" else state.params.gmrf_x
    loadings = meas.loadings_y if which == "y" else meas.loadings_x
    spec = specs[j]
    joint = build_joint_precision(state.adjacency, spec)
    q = joint.dense_precision()
    free = ~state.zero_mask(which)[:, j]
    q_ff = q[np.ix_(free, free)]
    pot = (q @ joint.mean)[free]
    chol = np.linalg.cholesky(q_ff)
    mean = solve_triangular(chol.T, solve_triangular(chol, pot, lower=True,
                                                     check_finite=False),
                            lower=False, check_finite=False)
    dev = loadings[free, j] - mean
    return float(np.log(np.diag(chol)).sum() - 0.5 * dev @ q_ff @ dev)


def _scale_variant_priors(state, which, j):
    p = state.params
    prior = state.prior
    specs = p.gmrf_y if which == "y" else p.gmrf_x
    spec = specs[j]
    df = prior.wishart_df_y if which == "y" else prior.wishart_df_x
    dim = spec.n_vars
    prec_t = np.linalg.inv(spec.cond_cov)
    logp = wishart_logpdf(prec_t, df, np.eye(dim) / (df * prior.wishart_scale))
    logp -= 0.5 * float(spec.mean_coef @ spec.mean_coef) / prior.loading_mean_var
    ecm = p.ecm
    coefs = np.concatenate([ecm.adjust_joint.ravel(), ecm.adjust_cross.ravel(),
                            ecm.adjust_exo.ravel()])
    if coefs.size:
        logp -= 0.5 * float((coefs ** 2 / state.longrun_prior_var()).sum())
    if ecm.shortrun_endo:
        k = np.hstack(ecm.shortrun_endo).ravel()
        logp -= 0.5 * float((k ** 2 / state.shortrun_prior_var()).sum())
        kx = np.hstack(ecm.shortrun_exo).ravel()
        logp -= 0.5 * float((kx ** 2 / state.shortrun_exo_prior_var()).sum())
    logp -= 0.5 * float((ecm.coint_joint ** 2).sum() + (ecm.coint_exo ** 2).sum())
    shape, rate = prior.state_precision_shape, prior.state_precision_rate
    for factor in (p.prec_factor_endo, p.prec_factor_exo):
        tau = np.diag(factor) ** 2
        logp += float(((shape - 1.0) * np.log(tau) - rate * tau).sum())
    return logp


def _scale_move_logtarget(state, which, j):
    resid_endo, resid_exo = _ecm_residuals(state)
    p = state.params
    return (_matrix_normal_loglike(resid_endo, p.prec_factor_endo)
            + _matrix_normal_loglike(resid_exo, p.prec_factor_exo)
            + _loading_column_logprior(state, which, j)
            + _scale_variant_priors(state, which, j))


def _apply_scale(state, which, j, c) -> float:
    """Rescale loading column j by c and factor j by 1/c, in place.

    Adjusts every coefficient referencing the factor so the likelihood is
    unchanged, and returns the log-Jacobian of the whole map.
    """
    p = state.params
    ecm = p.ecm
    m, l = p.m, p.l
    logc = float(np.log(c))
    n_t = state.factors.values.shape[0]
    n_lags = len(ecm.shortrun_endo)
    r_d = ecm.adjust_joint.shape[1]
    r_f = ecm.adjust_exo.shape[1]
    if which == "y":
        free = int((~state.zero_mask("y")[:, j]).sum())
        p.meas.loadings_y[:, j] *= c
        spec = p.gmrf_y[j]
        p.gmrf_y[j] = GmrfSpec(cond_cov=spec.cond_cov * c ** 2,
                               spatial_coef=spec.spatial_coef,
                               mean_design=spec.mean_design,
                               mean_coef=spec.mean_coef * c)
        state.factors.values[:, j] /= c
        ecm.adjust_joint[j, :] /= c
        ecm.coint_joint_endo[j, :] *= c
        ecm.adjust_cross[j, :] /= c
        for k in ecm.shortrun_endo:
            k[j, :] /= c
            k[:, j] *= c
        p.prec_factor_endo[j, j] *= c
        dim_sym = spec.n_vars * (spec.n_vars + 1) // 2
        # tally: column + mean coefs + precision entries + path + adjustment
        # rows (joint row cancels against the cointegration row) + lag blocks
        # + the squared diagonal of the precision factor
        return (free + spec.mean_coef.size - 2 * dim_sym - n_t
                - r_f - l * n_lags + 2) * logc
    free = int((~state.zero_mask("x")[:, j]).sum())
    p.meas.loadings_x[:, j] *= c
    spec = p.gmrf_x[j]
    p.gmrf_x[j] = GmrfSpec(cond_cov=spec.cond_cov * c ** 2,
                           spatial_coef=spec.spatial_coef,
                           mean_design=spec.mean_design,
                           mean_coef=spec.mean_coef * c)
    state.factors.values[:, m + j] /= c
    ecm.coint_joint_exo[j, :] *= c
    ecm.adjust_exo[j, :] /= c
    ecm.coint_exo[j, :] *= c
    for k in ecm.shortrun_endo:
        k[:, m + j] *= c
    for k in ecm.shortrun_exo:
        k[j, :] /= c
        k[:, j] *= c
    p.prec_factor_exo[j, j] *= c
    dim_sym = spec.n_vars * (spec.n_vars + 1) // 2
    return (free + spec.mean_coef.size - 2 * dim_sym - n_t
            + r_d + m * n_lags + 2) * logc


def sample_factor_scales(state: SamplerState, rng: np.random.Generator,
                         step: float = 0.4, repeats: int = 2) -> None:
    """Metropolis scale moves per factor (diagonal state-noise mode).

    The orbit density is nearly flat, so a couple of wide proposals per sweep
    keep the scale wandering at its true posterior spread.
    """
    if not state.diagonal_state_noise:
        return
    for which, count in (("y", state.params.m), ("x", state.params.l)):
        for j in range(count * repeats):
            j = j % count
            c = float(np.exp(step * rng.standard_normal()))
            log_before = _scale_move_logtarget(state, which, j)
            snapshot_params = state.params.copy()
            snapshot_values = state.factors.values.copy()
            jac = _apply_scale(state, which, j, c)
            log_after = _scale_move_logtarget(state, which, j)
            accepted = np.log(rng.random()) < log_after - log_before + jac
            if not accepted:
                state.params = snapshot_params
                state.factors = FactorPath(values=snapshot_values,
                                           m=snapshot_params.m)
            state.mh.record(f"scale.{which}.{j}", accepted)


def sample_factor_levels(state: SamplerState, rng: np.random.Generator) -> None:
    """Exact Gibbs translation of each factor level against the series means.

    The data likelihood is invariant under (factor + delta, means - column *
    delta), so the conditional of delta is Gaussian, assembled from the
    state-equation residual shift and the mean prior; translations carry no
    Jacobian.  Without this move the level split between nonstationary
    factors and the series means mixes arbitrarily slowly.
    """
    from .ecm import blocks_to_ecm

    p = state.params
    m, l = p.m, p.l
    meas = p.meas
    prec_endo = p.prec_factor_endo @ p.prec_factor_endo.T
    prec_exo = p.prec_factor_exo @ p.prec_factor_exo.T
    mean_prec = 1.0 / state.prior.mean_prior_var
    for idx in range(m + l):
        longrun = blocks_to_ecm(p.ecm).longrun
        col = longrun[:, idx]
        resid_endo, resid_exo = _ecm_residuals(state)
        n_eff = resid_endo.shape[0]
        we = prec_endo @ col[:m]
        wx = prec_exo @ col[m:]
        prec_delta = n_eff * (col[:m] @ we + col[m:] @ wx)
        pot_delta = resid_endo.sum(axis=0) @ we + resid_exo.sum(axis=0) @ wx
        if idx < m:
            column = meas.loadings_y[:, idx]
            means = meas.mean_y
        else:
            column = meas.loadings_x[:, idx - m]
            means = meas.mean_x
        prec_delta += (column @ column) * mean_prec
        pot_delta += (column @ means) * mean_prec
        if prec_delta <= 0:
            continue
        delta = pot_delta / prec_delta + rng.standard_normal() / np.sqrt(prec_delta)
        state.factors.values[:, idx] += delta
        means -= delta * column


# ---------------------------------------------------------------------------
# step 7: variable-selection indicators

def _bernoulli_inclusion(coef, spike, slab, prob, rng):
    log_w1 = np.log(prob) - 0.5 * (np.log(slab) + coef ** 2 / slab)
    log_w0 = np.log1p(-prob) - 0.5 * (np.log(spike) + coef ** 2 / spike)
    p_incl = 1.0 / (1.0 + np.exp(log_w0 - log_w1))
    return (rng.random(coef.shape[0]) < p_incl).astype(np.int8)


def inclusion_probability(coef, spike_var, slab_var, prior_prob):
    """Posterior inclusion probability of one coefficient (for tests/reporting)."""
    log_w1 = np.log(prior_prob) - 0.5 * (np.log(slab_var) + coef ** 2 / slab_var)
    log_w0 = np.log1p(-prior_prob) - 0.5 * (np.log(spike_var) + coef ** 2 / spike_var)
    return float(1.0 / (1.0 + np.exp(log_w0 - log_w1)))


def sample_ssvs_indicators(state: SamplerState, rng: np.random.Generator) -> None:
    if not state.ssvs_enabled:
        return
    ssvs = state.params.ssvs
    ecm = state.params.ecm
    prior = state.prior
    longrun = np.concatenate([
        ecm.adjust_joint.ravel(), ecm.adjust_cross.ravel(), ecm.adjust_exo.ravel()])
    if longrun.size:
        ssvs.include_longrun = _bernoulli_inclusion(
            longrun, ssvs.longrun_spike, ssvs.longrun_slab,
            prior.include_prob_longrun, rng)
    short = np.hstack(ecm.shortrun_endo).ravel() if ecm.shortrun_endo else np.zeros(0)
    if short.size:
        ssvs.include_shortrun = _bernoulli_inclusion(
            short, ssvs.shortrun_spike, ssvs.shortrun_slab,
            prior.include_prob_shortrun, rng)
    short_exo = np.hstack(ecm.shortrun_exo).ravel() if ecm.shortrun_exo else np.zeros(0)
    if short_exo.size:
        ssvs.include_shortrun_exo = _bernoulli_inclusion(
            short_exo, ssvs.shortrun_exo_spike, ssvs.shortrun_exo_slab,
            prior.include_prob_shortrun_exo, rng)
    if not state.diagonal_state_noise:
        for attr, factor in (("state_offdiag_include_endo", state.params.prec_factor_endo),
                             ("state_offdiag_include_exo", state.params.prec_factor_exo)):
            offdiag = np.concatenate([factor[:j, j] for j in range(1, factor.shape[0])]) \
                if factor.shape[0] > 1 else np.zeros(0)
            if offdiag.size:
                setattr(state, attr, _bernoulli_inclusion(
                    offdiag, np.full(offdiag.size, 0.01), np.full(offdiag.size, 1.0),
                    prior.include_prob_longrun, rng))


# ---------------------------------------------------------------------------
# initialization

def _initial_gmrf_specs(columns, n_sites, n_vars, rng):
    specs = []
    for j in range(columns.shape[1]):
        blocks = columns[:, j].reshape(n_sites, n_vars)
        variances = np.maximum(blocks.var(axis=0), 0.05)
        cond_cov = np.diag(variances)
        design = constant_mean_design(n_sites, n_vars)
        specs.append(GmrfSpec.from_reparam(cond_cov, np.zeros((n_vars, n_vars)),
                                           design, blocks.mean(axis=0)))
    return specs


def _initial_params(data, config, rng, anchors) -> tuple:
    """Data-driven starting point, overdispersed through the chain rng."""
    m, l, order = config.m, config.l, config.order
    y, x = data.y, data.x
    n_t = data.n_periods

    def svd_block(panel, k, anchor_rows):
        centered = panel - panel.mean(axis=1, keepdims=True)
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
        loadings = u[:, :k].copy()
        factors = centered.T @ loadings
        # rotate into the identified coordinates: the anchor submatrix becomes
        # lower triangular, so every chain starts in the same rotation mode
        q, _ = np.linalg.qr(loadings[list(anchor_rows[:k])].T)
        return loadings @ q, factors @ q

    loadings_y, fac_g = svd_block(y, m, anchors.y_rows)
    loadings_x, fac_f = svd_block(x, l, anchors.x_rows)
    # normalize each factor to unit innovation scale so chains start inside
    # the region the state-variance prior identifies, then overdisperse
    disperse = float(np.exp(rng.uniform(-0.7, 0.7)))
    for loadings, fac in ((loadings_y, fac_g), (loadings_x, fac_f)):
        scale = np.sqrt(np.maximum(np.diff(fac, axis=0).var(axis=0), 1e-8))
        scale *= disperse
        fac /= scale
        loadings *= scale
    loadings_y = loadings_y + 0.1 * rng.standard_normal(loadings_y.shape)
    loadings_x = loadings_x + 0.1 * rng.standard_normal(loadings_x.shape)
    loadings_y = apply_anchor_structure(loadings_y, anchors.y_rows)
    loadings_x = apply_anchor_structure(loadings_x, anchors.x_rows)

    resid_y = y - y.mean(axis=1, keepdims=True) - loadings_y @ fac_g.T
    resid_x = x - x.mean(axis=1, keepdims=True) - loadings_x @ fac_f.T
    meas = MeasurementModel(
        loadings_y=loadings_y, loadings_x=loadings_x,
        mean_y=y.mean(axis=1), mean_x=x.mean(axis=1),
        obs_var_y=np.maximum(resid_y.var(axis=1), 1e-4),
        obs_var_x=np.maximum(resid_x.var(axis=1), 1e-4))

    ecm = EcmBlocks.zeros(m, l, order=order)
    for name in ("adjust_joint", "coint_joint_endo", "coint_joint_exo",
                 "adjust_cross", "adjust_exo", "coint_exo"):
        arr = getattr(ecm, name)
        if arr.size:
            setattr(ecm, name, arr + 0.05 * rng.standard_normal(arr.shape))

    diff_g = np.diff(fac_g, axis=0) if n_t > 1 else np.ones((1, m))
    diff_f = np.diff(fac_f, axis=0) if n_t > 1 else np.ones((1, l))
    prec_endo = np.diag(1.0 / np.sqrt(np.maximum(diff_g.var(axis=0), 1e-3)))
    prec_exo = np.diag(1.0 / np.sqrt(np.maximum(diff_f.var(axis=0), 1e-3)))

    params = SdSemParams(
        meas=meas,
        gmrf_y=_initial_gmrf_specs(loadings_y, data.n_sites, data.n_vars_y, rng),
        gmrf_x=_initial_gmrf_specs(loadings_x, data.n_sites, data.n_vars_x, rng),
        ecm=ecm,
        prec_factor_endo=prec_endo,
        prec_factor_exo=prec_exo,
        ssvs=SsvsState(),
    )
    factors = FactorPath(values=np.hstack([fac_g, fac_f]), m=m)
    return params, factors


def _attach_ssvs(params: SdSemParams, scales: SpikeSlabScales) -> None:
    params.ssvs = SsvsState(
        include_longrun=np.ones(scales.longrun_spike.size, dtype=np.int8),
        include_shortrun=np.ones(scales.shortrun_spike.size, dtype=np.int8),
        include_shortrun_exo=np.ones(scales.shortrun_exo_spike.size, dtype=np.int8),
        longrun_spike=scales.longrun_spike, longrun_slab=scales.longrun_slab,
        shortrun_spike=scales.shortrun_spike, shortrun_slab=scales.shortrun_slab,
        shortrun_exo_spike=scales.shortrun_exo_spike,
        shortrun_exo_slab=scales.shortrun_exo_slab)


# ---------------------------------------------------------------------------
# chain drivers

def resolve_anchors(data, config, rng: np.random.Generator) -> AnchorSet:
    if getattr(config, "anchors_y", None) and getattr(config, "anchors_x", None):
        return AnchorSet(y_rows=config.anchors_y, x_rows=config.anchors_x)
    return select_anchor_states(data, config.m, config.l, rng)


def run_chain(data, config, rng: np.random.Generator, *, anchors: AnchorSet = None,
              scales: SpikeSlabScales = None, chain_id: int = 0,
              prior_only: bool = False, ssvs_enabled: bool = None,
              iterations: int = None, burn_in: int = None,
              thinning: int = None) -> PosteriorDraws:
    """Run one Gibbs chain and return the thinned draws.

    The spike/slab scales are taken from ``scales`` or produced by an
    internal preliminary run when variable selection is enabled.  Identical
    seeds give bit-identical chains.
    """
    iterations = config.iterations if iterations is None else iterations
    burn_in = config.burn_in if burn_in is None else burn_in
    thinning = config.thinning if thinning is None else thinning
    if ssvs_enabled is None:
        ssvs_enabled = getattr(config, "ssvs", True)
    if anchors is None:
        anchors = resolve_anchors(data, config, rng)
    if ssvs_enabled and scales is None:
        scales = preliminary_run(data, config, rng, anchors=anchors)

    params, factors = _initial_params(data, config, rng, anchors)
    if ssvs_enabled:
        _attach_ssvs(params, scales)
    state = SamplerState(
        params=params, factors=factors, anchors=anchors,
        adjacency=data.adjacency, z=data.z_matrix(), prior=config.prior,
        order=config.order, ssvs_enabled=ssvs_enabled, prior_only=prior_only,
        diagonal_state_noise=getattr(config, "diagonal_state_noise", True),
        mh=MhTuning(step_y=np.full(config.m, config.prior.mh_coef_step),
                    step_x=np.full(config.l, config.prior.mh_coef_step)),
    )
    if not state.diagonal_state_noise:
        state.state_offdiag_include_endo = np.ones(config.m * (config.m - 1) // 2,
                                                   dtype=np.int8)
        state.state_offdiag_include_exo = np.ones(config.l * (config.l - 1) // 2,
                                                  dtype=np.int8)

    kept_params, kept_factors, kept_dev = [], [], []
    for it in range(iterations):
        sample_factors(state, rng)
        sample_loadings(state, rng)
        sample_gmrf_hypers(state, rng)
        sample_obs_precisions(state, rng)
        sample_ecm_coeffs(state, rng)
        sample_state_noise(state, rng)
        sample_ssvs_indicators(state, rng)
        sample_means(state, rng)
        sample_factor_scales(state, rng)
        sample_factor_levels(state, rng)
        if state.prior.mh_adapt and it < burn_in and (it + 1) % 50 == 0:
            state.mh.adapt(state.prior)
        if it >= burn_in and (it - burn_in) % thinning == 0:
            dev = deviance(state.params, state.z, state.factors) \
                if not prior_only else float("nan")
            if not prior_only and not np.isfinite(dev):
                raise ChainDiverged(f"non-finite deviance at iteration {it}")
            kept_params.append(state.params.copy())
            kept_factors.append(FactorPath(state.factors.values.copy(), m=config.m))
            kept_dev.append(dev)

    meta = ChainMeta(iterations=iterations, burn_in=burn_in, thinning=thinning,
                     seed=getattr(config, "seed", None), chain_id=chain_id,
                     anchors=anchors, acceptance=state.mh.rates())
    return PosteriorDraws(params=kept_params, factors=kept_factors, meta=meta,
                          deviances=np.asarray(kept_dev))


def preliminary_run(data, config, rng: np.random.Generator, *,
                    anchors: AnchorSet = None) -> SpikeSlabScales:
    """Short wide-prior chain producing per-coefficient variance estimates.

    The returned scales are the spike/slab variances (0.1 and 10 times the
    estimated variance, floored away from zero).
    """
    iterations = getattr(config, "preliminary_iterations", 400)
    burn_in = getattr(config, "preliminary_burn_in", 150)
    thinning = getattr(config, "preliminary_thinning", 2)
    draws = run_chain(data, config, rng, anchors=anchors, ssvs_enabled=False,
                      iterations=iterations, burn_in=burn_in, thinning=thinning)
    if draws.n_draws < 2:
        raise ChainDiverged("preliminary run produced too few draws")
    longrun, short, short_exo = [], [], []
    for p in draws.params:
        e = p.ecm
        longrun.append(np.concatenate([
            e.adjust_joint.ravel(), e.adjust_cross.ravel(), e.adjust_exo.ravel()]))
        short.append(np.hstack(e.shortrun_endo).ravel() if e.shortrun_endo
                     else np.zeros(0))
        short_exo.append(np.hstack(e.shortrun_exo).ravel() if e.shortrun_exo
                         else np.zeros(0))
    variances = {
        "longrun": np.asarray(longrun).var(axis=0) if longrun[0].size else np.zeros(0),
        "shortrun": np.asarray(short).var(axis=0) if short[0].size else np.zeros(0),
        "shortrun_exo": (np.asarray(short_exo).var(axis=0)
                         if short_exo[0].size else np.zeros(0)),
    }
    for arr in variances.values():
        if arr.size and not np.all(np.isfinite(arr)):
            raise ChainDiverged("preliminary run produced non-finite variances")
    return scales_from_variances(variances, config.prior)


def run_chains(data, config) -> list:
    """Run the configured number of chains with independent seed streams.

    Anchor selection and the preliminary run happen once; every chain shares
    them so draws are comparable across chains.
    """
    seq = np.random.SeedSequence(config.seed)
    n_chains = getattr(config, "chains", 1)
    children = seq.spawn(n_chains + 2)
    anchors = resolve_anchors(data, config, np.random.default_rng(children[0]))
    scales = None
    if getattr(config, "ssvs", True):
        scales = preliminary_run(data, config, np.random.default_rng(children[1]),
                                 anchors=anchors)
    out = []
    for c in range(n_chains):
        rng = np.random.default_rng(children[2 + c])
        out.append(run_chain(data, config, rng, anchors=anchors, scales=scales,
                             chain_id=c))
    return out


def pick_draw_columns(draws: PosteriorDraws) -> dict:
    """Flatten each retained draw into named scalar series for diagnostics."""
    if draws.n_draws == 0:
        raise EmptyChain("no retained draws")
    out = {}

    def add(name, values):
        out[name] = np.asarray(values)

    first = draws.params[0]
    ny, m = first.meas.loadings_y.shape
    nx, l = first.meas.loadings_x.shape
    for i in range(ny):
        for j in range(m):
            add(f"loadings_y.{i}.{j}",
                [p.meas.loadings_y[i, j] for p in draws.params])
    for i in range(nx):
        for j in range(l):
            add(f"loadings_x.{i}.{j}",
                [p.meas.loadings_x[i, j] for p in draws.params])
    for i in range(ny):
        add(f"obs_var_y.{i}", [p.meas.obs_var_y[i] for p in draws.params])
        add(f"mean_y.{i}", [p.meas.mean_y[i] for p in draws.params])
    for i in range(nx):
        add(f"obs_var_x.{i}", [p.meas.obs_var_x[i] for p in draws.params])
        add(f"mean_x.{i}", [p.meas.mean_x[i] for p in draws.params])
    for j in range(m):
        spec_list = [p.gmrf_y[j] for p in draws.params]
        nv = spec_list[0].n_vars
        for a in range(nv):
            for b in range(nv):
                add(f"gmrf_y.{j}.coef.{a}.{b}",
                    [s.spatial_coef_reparam[a, b] for s in spec_list])
                add(f"gmrf_y.{j}.cov.{a}.{b}",
                    [s.cond_cov[a, b] for s in spec_list])
        for qi in range(spec_list[0].mean_coef.size):
            add(f"gmrf_y.{j}.mean.{qi}", [s.mean_coef[qi] for s in spec_list])
    for j in range(l):
        spec_list = [p.gmrf_x[j] for p in draws.params]
        nv = spec_list[0].n_vars
        for a in range(nv):
            for b in range(nv):
                add(f"gmrf_x.{j}.coef.{a}.{b}",
                    [s.spatial_coef_reparam[a, b] for s in spec_list])
                add(f"gmrf_x.{j}.cov.{a}.{b}",
                    [s.cond_cov[a, b] for s in spec_list])
        for qi in range(spec_list[0].mean_coef.size):
            add(f"gmrf_x.{j}.mean.{qi}", [s.mean_coef[qi] for s in spec_list])

    def add_matrix(name, getter, shape):
        for a in range(shape[0]):
            for b in range(shape[1]):
                add(f"{name}.{a}.{b}", [getter(p)[a, b] for p in draws.params])

    e = first.ecm
    add_matrix("ecm.adjust_joint", lambda p: p.ecm.adjust_joint, e.adjust_joint.shape)
    add_matrix("ecm.coint_joint_endo", lambda p: p.ecm.coint_joint_endo,
               e.coint_joint_endo.shape)
    add_matrix("ecm.coint_joint_exo", lambda p: p.ecm.coint_joint_exo,
               e.coint_joint_exo.shape)
    add_matrix("ecm.adjust_cross", lambda p: p.ecm.adjust_cross, e.adjust_cross.shape)
    add_matrix("ecm.adjust_exo", lambda p: p.ecm.adjust_exo, e.adjust_exo.shape)
    add_matrix("ecm.coint_exo", lambda p: p.ecm.coint_exo, e.coint_exo.shape)
    for i, k in enumerate(e.shortrun_endo):
        add_matrix(f"ecm.shortrun_endo.{i}",
                   lambda p, i=i: p.ecm.shortrun_endo[i], k.shape)
    for i, k in enumerate(e.shortrun_exo):
        add_matrix(f"ecm.shortrun_exo.{i}",
                   lambda p, i=i: p.ecm.shortrun_exo[i], k.shape)
    for i in range(m):
        for j in range(i, m):
            add(f"state_prec_endo.{i}.{j}",
                [p.prec_factor_endo[i, j] for p in draws.params])
    for i in range(l):
        for j in range(i, l):
            add(f"state_prec_exo.{i}.{j}",
                [p.prec_factor_exo[i, j] for p in draws.params])
    if draws.deviances is not None and np.all(np.isfinite(draws.deviances)):
        add("deviance", draws.deviances)
    return out
