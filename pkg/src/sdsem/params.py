"""Parameter containers shared by the sampler, forecaster and multipliers."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .ecm import EcmBlocks, blocks_to_ecm, ecm_to_var
from .errors import DimensionMismatch
from .lattice import GmrfSpec
from .state_space import FactorDynamics, MeasurementModel


@dataclass
class PriorConfig:
    """Prior hyperparameters.  Defaults follow the reference configuration.

    Gamma priors are (shape, rate); the spike/slab multipliers scale the
    per-coefficient variance estimates produced by the preliminary run.
    """

    obs_precision_shape: float = 0.01
    obs_precision_rate: float = 0.01
    # informative scale anchor: the factor/loading split is likelihood
    # invariant under common rescaling, so the state innovation variance is
    # pinned near one (mean 1, zero density at zero precision)
    state_precision_shape: float = 2.0
    state_precision_rate: float = 2.0
    loading_mean_var: float = 100.0          # variance of GMRF mean coefficients
    wishart_df_y: float = 20.0
    wishart_df_x: float = 20.0
    wishart_scale: float = 1.0               # S = wishart_scale * I
    gmrf_coef_scale: float = 0.05            # prior scale of the spatial coefficients
    include_prob_longrun: float = 0.5
    include_prob_shortrun: float = 0.5
    include_prob_shortrun_exo: float = 0.5
    ssvs_spike_mult: float = 0.1
    ssvs_slab_mult: float = 10.0
    mean_prior_var: float = 100.0            # variance of the series means
    init_state_scale: float = 1e4            # kappa: alpha(0) ~ N(0, kappa I)
    preliminary_prior_var: float = 100.0     # wide Gaussian used by the preliminary run
    mh_coef_step: float = 0.01               # random-walk step on spatial coefficients
    mh_adapt: bool = True
    mh_accept_low: float = 0.25
    mh_accept_high: float = 0.40
    mh_wishart_df: float = 100.0             # proposal concentration for cond. precisions

    def init_state(self, dim: int) -> tuple:
        return np.zeros(dim), self.init_state_scale * np.eye(dim)


@dataclass
class SsvsState:
    """Inclusion indicators and spike/slab variance scales.

    ``include_longrun`` covers the vectorized adjustment blocks in the order
    (joint, cross, exogenous); the short-run vectors cover the vectorized lag
    coefficients of the endogenous and exogenous equations respectively.
    """

    include_longrun: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    include_shortrun: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    include_shortrun_exo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    longrun_spike: np.ndarray = field(default_factory=lambda: np.zeros(0))
    longrun_slab: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shortrun_spike: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shortrun_slab: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shortrun_exo_spike: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shortrun_exo_slab: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def longrun_var(self) -> np.ndarray:
        """Per-coefficient prior variances implied by the current indicators."""
        return np.where(self.include_longrun == 1, self.longrun_slab, self.longrun_spike)

    def shortrun_var(self) -> np.ndarray:
        return np.where(self.include_shortrun == 1, self.shortrun_slab, self.shortrun_spike)

    def shortrun_exo_var(self) -> np.ndarray:
        return np.where(self.include_shortrun_exo == 1,
                        self.shortrun_exo_slab, self.shortrun_exo_spike)


@dataclass(frozen=True)
class AnchorSet:
    """Row indices whose loading entries carry the identification constraints.

    The anchor rows of each loading matrix form a lower-triangular submatrix
    with strictly positive diagonal, one anchor row per factor, in order.
    """

    y_rows: tuple
    x_rows: tuple

    def __post_init__(self):
        object.__setattr__(self, "y_rows", tuple(int(i) for i in self.y_rows))
        object.__setattr__(self, "x_rows", tuple(int(i) for i in self.x_rows))
        if len(set(self.y_rows)) != len(self.y_rows):
            raise DimensionMismatch("duplicate anchor rows for the Y loadings")
        if len(set(self.x_rows)) != len(self.x_rows):
            raise DimensionMismatch("duplicate anchor rows for the X loadings")

    def fixed_zero_mask_y(self, n_rows: int, m: int) -> np.ndarray:
        return _zero_mask(self.y_rows, n_rows, m)

    def fixed_zero_mask_x(self, n_rows: int, l: int) -> np.ndarray:
        return _zero_mask(self.x_rows, n_rows, l)


def _zero_mask(rows, n_rows: int, n_cols: int) -> np.ndarray:
    """Boolean mask of loading entries pinned to zero by identification."""
    mask = np.zeros((n_rows, n_cols), dtype=bool)
    for j, r in enumerate(rows[:n_cols]):
        mask[r, j + 1:] = True
    return mask


def apply_anchor_structure(loadings: np.ndarray, rows) -> np.ndarray:
    """Force the anchor submatrix lower triangular with positive diagonal."""
    out = np.array(loadings, dtype=float)
    n_cols = out.shape[1]
    for j, r in enumerate(rows[:n_cols]):
        out[r, j + 1:] = 0.0
        if out[r, j] <= 0:
            out[:, j] = -out[:, j]
            if out[r, j] == 0:
                out[r, j] = 1.0
    return out


@dataclass
class SdSemParams:
    """One complete parameter draw of the model."""

    meas: MeasurementModel
    gmrf_y: list            # one GmrfSpec per endogenous loading column
    gmrf_x: list            # one GmrfSpec per exogenous loading column
    ecm: EcmBlocks
    prec_factor_endo: np.ndarray   # V with inv(state_cov_endo) = V V'
    prec_factor_exo: np.ndarray
    ssvs: SsvsState = None

    def __post_init__(self):
        self.prec_factor_endo = np.atleast_2d(np.asarray(self.prec_factor_endo, dtype=float))
        self.prec_factor_exo = np.atleast_2d(np.asarray(self.prec_factor_exo, dtype=float))
        m = self.meas.n_factors_y
        l = self.meas.n_factors_x
        if len(self.gmrf_y) != m or len(self.gmrf_x) != l:
            raise DimensionMismatch("one GMRF spec required per loading column")
        if self.ecm.m != m or self.ecm.l != l:
            raise DimensionMismatch("ECM blocks disagree with factor counts")
        if self.prec_factor_endo.shape != (m, m) or self.prec_factor_exo.shape != (l, l):
            raise DimensionMismatch("state precision factors have wrong shape")

    @property
    def m(self) -> int:
        return self.meas.n_factors_y

    @property
    def l(self) -> int:
        return self.meas.n_factors_x

    @property
    def state_cov_endo(self) -> np.ndarray:
        return np.linalg.inv(self.prec_factor_endo @ self.prec_factor_endo.T)

    @property
    def state_cov_exo(self) -> np.ndarray:
        return np.linalg.inv(self.prec_factor_exo @ self.prec_factor_exo.T)

    def dynamics(self) -> FactorDynamics:
        """Level-VAR coefficient lists implied by the ECM blocks."""
        phis = ecm_to_var(blocks_to_ecm(self.ecm))
        m = self.m
        return FactorDynamics(
            endo_coefs=[p[:m, :m] for p in phis],
            cross_coefs=[p[:m, m:] for p in phis],
            exo_coefs=[p[m:, m:] for p in phis],
            state_cov_endo=self.state_cov_endo,
            state_cov_exo=self.state_cov_exo,
        )

    def copy(self) -> "SdSemParams":
        return copy.deepcopy(self)
