"""Predictive model choice over factor-count grids via the PMCC statistic.

For each retained draw a replicate response panel is simulated from the
measurement equation at the drawn parameters and factor path.  The goodness
term G sums the squared gaps between the data and the replicate means per
cell; the penalty term P sums the replicate variances.  With the default
infinite weight the criterion is G + P; overfitted models inflate P through
their predictive variances.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .errors import EmptyChain
from .mcmc import PosteriorDraws, gelman_rubin, run_chains


@dataclass
class PmccResult:
    goodness: float
    penalty: float
    pmcc: float
    weight: float
    m: int
    l: int
    runtime: float = float("nan")
    converged: bool = True

    def as_row(self) -> dict:
        return {"m": self.m, "l": self.l, "G": self.goodness, "P": self.penalty,
                "PMCC": self.pmcc, "runtime": self.runtime,
                "converged": self.converged}


def pmcc_weighted(goodness: float, penalty: float, weight: float) -> float:
    """weight/(weight+1) * G + P, with the infinite-weight limit G + P."""
    if np.isinf(weight):
        return goodness + penalty
    return weight / (weight + 1.0) * goodness + penalty


def pmcc(draws, data_y: np.ndarray, rng: np.random.Generator = None,
         weight: float = float("inf"), replicates_per_draw: int = 1) -> PmccResult:
    """PMCC of the response panel under one fitted chain (or chain list).

    ``data_y`` is the observed (n_y_rows, T) panel the chain was fitted to.
    One replicate per retained draw is simulated by default.
    """
    chain_list = draws if isinstance(draws, (list, tuple)) else [draws]
    params = [p for d in chain_list for p in d.params]
    factors = [f for d in chain_list for f in d.factors]
    if not params:
        raise EmptyChain("PMCC needs at least one retained draw")
    rng = np.random.default_rng(0) if rng is None else rng
    data_y = np.asarray(data_y, dtype=float)

    reps = []
    for p, path in zip(params, factors):
        fitted = (p.meas.mean_y[:, None]
                  + p.meas.loadings_y @ path.endo.T)
        for _ in range(replicates_per_draw):
            noise = rng.standard_normal(fitted.shape) \
                * np.sqrt(p.meas.obs_var_y)[:, None]
            reps.append(fitted + noise)
    reps = np.stack(reps)
    rep_mean = reps.mean(axis=0)
    rep_var = reps.var(axis=0, ddof=1) if reps.shape[0] > 1 \
        else np.zeros_like(rep_mean)
    goodness = float(((data_y - rep_mean) ** 2).sum())
    penalty = float(rep_var.sum())
    meta = chain_list[0].meta
    return PmccResult(goodness=goodness, penalty=penalty,
                      pmcc=pmcc_weighted(goodness, penalty, weight),
                      weight=weight,
                      m=params[0].meas.n_factors_y, l=params[0].meas.n_factors_x)


def grid_search(data, m_range, l_range, config, *, points=None,
                weight: float = float("inf")) -> list:
    """Fit every (m, l) grid point and rank ascending by PMCC.

    The grid is the cartesian product of the ranges unless explicit
    ``points`` are given.  A failed fit is reported with NaN statistics
    rather than aborting the grid.
    """
    if points is None:
        points = [(m, l) for m in m_range for l in l_range]
    points = list(points)
    if not points:
        raise EmptyChain("empty model grid")
    results = []
    for m, l in points:
        trial = dataclasses.replace(config, m=int(m), l=int(l),
                                    anchors_y=None, anchors_x=None)
        start = time.time()
        try:
            chains = run_chains(data, trial)
            rng = np.random.default_rng(np.random.SeedSequence(
                [trial.seed, int(m), int(l)]))
            result = pmcc(chains, data.y, rng=rng, weight=weight,
                          replicates_per_draw=config.forecast_replicates)
            result.runtime = time.time() - start
            result.converged = _converged(chains)
        except Exception:
            result = PmccResult(goodness=float("nan"), penalty=float("nan"),
                                pmcc=float("inf"), weight=weight, m=int(m),
                                l=int(l), runtime=time.time() - start,
                                converged=False)
        results.append(result)
    return sorted(results, key=lambda r: (r.pmcc, r.m + r.l))


def _converged(chains, threshold: float = 1.2) -> bool:
    if len(chains) < 2:
        return True
    try:
        return gelman_rubin([c.deviances for c in chains]) < threshold
    except Exception:
        return False
