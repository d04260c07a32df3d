"""Dynamic multipliers: responses of the Y panel to shocks in the X panel.

A shock in X maps into the exogenous factor space through the pseudo-inverse
of the exogenous loadings, propagates through the distributed-lag dynamics of
the endogenous factors and re-emerges through the endogenous loadings.  The
propagation uses a shift-register companion system in which the exogenous
factors act as a forcing term only: their own autoregression is deliberately
absent, so these are marginal responses to an isolated exogenous impulse and
intentionally differ from unconditional forecasting, where the exogenous
dynamics do propagate.

The horizon-k multiplier is

    response_k = loadings_y @ selector @ transition^k @ input @ pinv(loadings_x)

computed by iterated multiplication.  The horizon-0 multiplier is a
structural zero: the dynamics carry no contemporaneous exogenous term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyChain, RankDeficientLoadings
from .state_space import FactorDynamics

BAND_PERCENTILES = (16.0, 84.0, 5.0, 95.0)


@dataclass
class CompanionJQB:
    """Shift-register companion system driving the multiplier recursion.

    selector picks the current endogenous block out of the register state;
    input injects the exogenous forcing into its first register slot.
    """

    selector: np.ndarray    # (m, m*p + l*s)
    transition: np.ndarray  # (m*p + l*s, m*p + l*s)
    input: np.ndarray       # (m*p + l*s, l)

    @property
    def dim(self) -> int:
        return self.transition.shape[0]


@dataclass
class MultiplierSeries:
    """Posterior summary of the multiplier matrices over horizons 0..K.

    ``draws`` has shape (n_draws, K+1, n_y_rows, n_x_rows); band arrays are
    indexed the same way minus the draw axis.
    """

    horizons: np.ndarray
    draws: np.ndarray
    mean: np.ndarray
    bands: dict

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def build_jqb(dyn: FactorDynamics) -> CompanionJQB:
    """Assemble the selector/transition/input triple from the factor dynamics.

    The endogenous section keeps p register blocks of size m, the exogenous
    section max(q, s) blocks of size l (enough to feed every distributed-lag
    term; coefficients beyond the cross-lag count are zero).
    """
    m, l = dyn.m, dyn.l
    p = max(1, len(dyn.endo_coefs))
    n_exo_regs = max(1, len(dyn.cross_coefs), len(dyn.exo_coefs))
    cs, ds, _ = dyn.padded(max(p, n_exo_regs))
    dim = m * p + l * n_exo_regs

    transition = np.zeros((dim, dim))
    for i in range(p):
        transition[:m, i * m:(i + 1) * m] = cs[i]
    for j in range(n_exo_regs):
        col = m * p + j * l
        transition[:m, col:col + l] = ds[j]
    for i in range(p - 1):
        transition[(i + 1) * m:(i + 2) * m, i * m:(i + 1) * m] = np.eye(m)
    for j in range(n_exo_regs - 1):
        row = m * p + (j + 1) * l
        col = m * p + j * l
        transition[row:row + l, col:col + l] = np.eye(l)

    selector = np.zeros((m, dim))
    selector[:, :m] = np.eye(m)

    inp = np.zeros((dim, l))
    inp[m * p:m * p + l, :] = np.eye(l)

    return CompanionJQB(selector=selector, transition=transition, input=inp)


def pseudo_inverse_loadings(loadings_x: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of the exogenous loadings.

    Raises RankDeficientLoadings when the columns are not independent, since
    the implied factor shock would be ill-defined.
    """
    loadings_x = np.asarray(loadings_x, dtype=float)
    gram = loadings_x.T @ loadings_x
    if gram.size and (np.linalg.matrix_rank(gram) < gram.shape[0]
                      or np.linalg.cond(gram) > 1e12):
        raise RankDeficientLoadings("exogenous loadings are rank deficient")
    return np.linalg.pinv(loadings_x)


def impulse_response(params_draw, horizon: int) -> list:
    """Multiplier matrices at horizons 0..K for one parameter draw.

    ``params_draw`` provides ``meas`` (loadings) and ``dynamics()``.
    Each matrix is (n_y_rows, n_x_rows): entry (i, j) is the response of
    Y-row i to a unit shock in X-row j.
    """
    if horizon < 0:
        raise DimensionMismatch("horizon must be non-negative")
    meas = params_draw.meas
    dyn = params_draw.dynamics()
    jqb = build_jqb(dyn)
    pinv_x = pseudo_inverse_loadings(meas.loadings_x)
    h_y = meas.loadings_y

    out = []
    forced = jqb.input @ pinv_x  # transition^0 @ input @ pinv
    for _ in range(horizon + 1):
        out.append(h_y @ (jqb.selector @ forced))
        forced = jqb.transition @ forced
    return out


def multiplier_posterior(draws, horizon: int,
                         percentiles=BAND_PERCENTILES) -> MultiplierSeries:
    """Posterior mean and percentile bands of the multipliers over a chain.

    Draws whose exogenous loadings are rank deficient are skipped and counted
    in ``bands['skipped']`` being absent -- the count is exposed on the
    returned series as the shrunken first axis of ``draws``.
    """
    params = getattr(draws, "params", draws)
    per_draw = []
    for p in params:
        try:
            per_draw.append(np.stack(impulse_response(p, horizon)))
        except RankDeficientLoadings:
            continue
    if not per_draw:
        raise EmptyChain("no usable draws for multiplier analysis")
    stack = np.stack(per_draw)
    bands = {f"p{int(round(q)):02d}": np.percentile(stack, q, axis=0)
             for q in percentiles}
    return MultiplierSeries(
        horizons=np.arange(horizon + 1),
        draws=stack,
        mean=stack.mean(axis=0),
        bands=bands,
    )
