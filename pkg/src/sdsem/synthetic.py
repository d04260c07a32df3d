"""Ground-truth model builders for simulation studies and the CLI."""

from __future__ import annotations

import numpy as np

from .ecm import EcmBlocks, blocks_to_ecm, ecm_to_var
from .errors import NonFiniteSample
from .lattice import AdjacencyMatrix, GmrfSpec, build_joint_precision, \
    constant_mean_design, sample_gmrf
from .params import AnchorSet, SdSemParams, apply_anchor_structure
from .state_space import MeasurementModel, assemble_companion, spectral_radius


def lattice_for(n_sites: int) -> AdjacencyMatrix:
    """A rook grid when n_sites is a perfect square, else a ring."""
    side = int(round(np.sqrt(n_sites)))
    if side * side == n_sites and n_sites > 1:
        return AdjacencyMatrix.grid(side, side)
    if n_sites == 1:
        return AdjacencyMatrix(np.zeros((1, 1), dtype=int), allow_isolated=True)
    edges = [(i, (i + 1) % n_sites) for i in range(n_sites)]
    return AdjacencyMatrix.from_edges(edges, n_sites)


def spread_anchor_rows(n_rows: int, k: int) -> tuple:
    """Evenly spaced anchor rows, one per factor."""
    return tuple(int(round(i * (n_rows - 1) / max(k - 1, 1))) for i in range(k))


def _draw_loadings(w, n_vars, n_cols, rng, spatial_coef, cond_var, mean_level):
    design = constant_mean_design(w.n_sites, n_vars)
    specs, columns = [], []
    for j in range(n_cols):
        mean_coef = np.full(n_vars, mean_level / (j + 1.0))
        spec = GmrfSpec.from_reparam(cond_var * np.eye(n_vars),
                                     spatial_coef * np.eye(n_vars),
                                     design, mean_coef)
        joint = build_joint_precision(w, spec)
        columns.append(sample_gmrf(joint, rng))
        specs.append(spec)
    return np.column_stack(columns), specs


def default_ecm_blocks(m: int, l: int, order: int = 2,
                       coint_strength: float = 0.4) -> EcmBlocks:
    """Cointegrated truth with one joint and one exogenous relation.

    Ranks: the joint and exogenous products have rank min(1, m-1) and
    min(1, l-1); adjustment entries scale with ``coint_strength``.
    """
    # cointegration vectors stay inside the unit-norm range of their prior
    blocks = EcmBlocks.zeros(m, l, order=order)
    if blocks.adjust_joint.shape[1]:
        blocks.adjust_joint[:, 0] = [-coint_strength] + [coint_strength / 2] * (m - 1)
        blocks.coint_joint_endo[:, 0] = [0.7] + [-0.4] * (m - 1)
        blocks.coint_joint_exo[:, 0] = [-0.35] + [0.0] * (l - 1)
    if blocks.adjust_exo.shape[1]:
        blocks.adjust_exo[:, 0] = [-coint_strength] + [coint_strength / 2] * (l - 1)
        blocks.coint_exo[:, 0] = [0.7] + [-0.5] * (l - 1)
        blocks.adjust_cross[:, 0] = [0.15] + [0.0] * (m - 1)
    for i, k in enumerate(blocks.shortrun_endo):
        k += np.hstack([0.2 * np.eye(m), 0.1 * np.ones((m, l))]) / (i + 1)
    for i, k in enumerate(blocks.shortrun_exo):
        k += 0.15 * np.eye(l) / (i + 1)
    return blocks


def _stabilize(blocks: EcmBlocks, meas: MeasurementModel, max_tries: int = 40):
    """Shrink the dynamics until the companion has no explosive roots."""
    from .state_space import FactorDynamics

    for _ in range(max_tries):
        phis = ecm_to_var(blocks_to_ecm(blocks))
        m = blocks.m
        dyn = FactorDynamics(
            endo_coefs=[p[:m, :m] for p in phis],
            cross_coefs=[p[:m, m:] for p in phis],
            exo_coefs=[p[m:, m:] for p in phis],
            state_cov_endo=np.eye(blocks.m), state_cov_exo=np.eye(blocks.l))
        if spectral_radius(assemble_companion(dyn, meas).transition) <= 1.0 + 1e-8:
            return blocks
        for name in ("adjust_joint", "adjust_cross", "adjust_exo"):
            setattr(blocks, name, 0.9 * getattr(blocks, name))
        blocks.shortrun_endo = [0.9 * k for k in blocks.shortrun_endo]
        blocks.shortrun_exo = [0.9 * k for k in blocks.shortrun_exo]
    raise NonFiniteSample("could not stabilize the synthetic dynamics")


def make_true_params(n_sites: int, m: int, l: int, rng: np.random.Generator, *,
                     n_vars_y: int = 1, n_vars_x: int = 1, order: int = 2,
                     spatial_coef: float = -0.2, cond_var: float = 1.0,
                     obs_var: float = 0.05, mean_level: float = 2.0,
                     state_var: float = 1.0, coint_strength: float = 0.4,
                     blocks: EcmBlocks = None):
    """Build a ground-truth parameter set on a small lattice.

    Returns (params, anchors, adjacency).  The default spatial coefficient is
    negative, i.e. positive spatial association between neighbor loadings.
    """
    w = lattice_for(n_sites)
    loadings_y, gmrf_y = _draw_loadings(w, n_vars_y, m, rng, spatial_coef,
                                        cond_var, mean_level)
    loadings_x, gmrf_x = _draw_loadings(w, n_vars_x, l, rng, spatial_coef,
                                        cond_var, mean_level)
    anchors = AnchorSet(y_rows=spread_anchor_rows(n_sites * n_vars_y, m),
                        x_rows=spread_anchor_rows(n_sites * n_vars_x, l))
    loadings_y = apply_anchor_structure(loadings_y, anchors.y_rows)
    loadings_x = apply_anchor_structure(loadings_x, anchors.x_rows)

    meas = MeasurementModel(
        loadings_y=loadings_y, loadings_x=loadings_x,
        mean_y=np.full(n_sites * n_vars_y, 1.0),
        mean_x=np.full(n_sites * n_vars_x, 0.5),
        obs_var_y=np.full(n_sites * n_vars_y, obs_var),
        obs_var_x=np.full(n_sites * n_vars_x, obs_var))

    if blocks is None:
        blocks = default_ecm_blocks(m, l, order=order,
                                    coint_strength=coint_strength)
    blocks = _stabilize(blocks, meas)

    prec = 1.0 / np.sqrt(state_var)
    params = SdSemParams(
        meas=meas, gmrf_y=gmrf_y, gmrf_x=gmrf_x, ecm=blocks,
        prec_factor_endo=prec * np.eye(m), prec_factor_exo=prec * np.eye(l))
    return params, anchors, w
