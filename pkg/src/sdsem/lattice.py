"""Lattice adjacency and multivariate GMRF priors for factor-loading columns.

A loading column stacks one block of ``n_vars`` values per lattice site.  Its
joint law is Gaussian with a sparse precision assembled from the binary
adjacency W, a conditional covariance T shared across sites and a spatial
coefficient matrix F shared across neighbor pairs:

    Q = (I_N kron T^{-1/2}) [I + W_U kron Ft + W_L kron Ft'] (I_N kron T^{-1/2})

where ``Ft = T^{-1/2} F T^{1/2}`` is the reparametrized coefficient and W_U,
W_L are the upper and lower triangular parts of W.  The reparametrization
makes Q symmetric for any F; positive definiteness still has to be checked.

Sign convention: F enters the precision with a positive sign, so a *positive*
F produces *negative* spatial association.  The conditional-mean regression
weights on neighboring sites are ``-F``; use :meth:`GmrfSpec.from_association`
to specify those directly.

The square root T^{1/2} is the symmetric (spectral) one.  A Cholesky root
would re-coordinate Ft but leave the implied covariance unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, FactorizationFailure, NotPositiveDefinite

PD_TOL = 1e-10


def sym_sqrt(mat: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) of an SPD matrix."""
    vals, vecs = np.linalg.eigh(np.asarray(mat, dtype=float))
    if np.any(vals <= 0):
        raise NotPositiveDefinite("matrix has non-positive eigenvalues")
    root = np.sqrt(vals)
    if inverse:
        root = 1.0 / root
    return (vecs * root) @ vecs.T


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Binary, symmetric, zero-diagonal site adjacency.

    Parameters
    ----------
    entries : (N, N) array of {0, 1}
        ``entries[i, u] == 1`` when sites i and u are neighbors.
    allow_isolated : bool
        Permit rows with no neighbors (default False).
    """

    entries: np.ndarray
    allow_isolated: bool = False

    def __post_init__(self):
        w = np.asarray(self.entries, dtype=np.int8)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionMismatch(f"adjacency must be square, got {w.shape}")
        if not np.array_equal(w, w.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(w) != 0):
            raise ValueError("adjacency diagonal must be zero")
        if not np.isin(w, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if not self.allow_isolated and w.shape[0] > 1 and np.any(w.sum(axis=1) == 0):
            raise ValueError("adjacency has an isolated site; pass allow_isolated=True to permit")
        object.__setattr__(self, "entries", w)

    @property
    def n_sites(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_edges(cls, edges, n_sites: int, **kwargs) -> "AdjacencyMatrix":
        """Build from an iterable of undirected (i, u) index pairs."""
        w = np.zeros((n_sites, n_sites), dtype=np.int8)
        for i, u in edges:
            if not (0 <= i < n_sites and 0 <= u < n_sites):
                raise DimensionMismatch(f"edge ({i}, {u}) outside 0..{n_sites - 1}")
            if i == u:
                raise ValueError(f"self edge at site {i}")
            w[i, u] = 1
            w[u, i] = 1
        return cls(w, **kwargs)

    @classmethod
    def grid(cls, rows: int, cols: int) -> "AdjacencyMatrix":
        """Rook-neighbor lattice on a rows x cols grid (row-major site order)."""
        edges = []
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                if c + 1 < cols:
                    edges.append((i, i + 1))
                if r + 1 < rows:
                    edges.append((i, i + cols))
        return cls.from_edges(edges, rows * cols, allow_isolated=(rows * cols == 1))


def constant_mean_design(n_sites: int, n_vars: int) -> np.ndarray:
    """Design matrix for a spatially constant mean (one intercept per variable)."""
    return np.kron(np.ones((n_sites, 1)), np.eye(n_vars))


@dataclass
class GmrfSpec:
    """Hyperparameters of one loading-column GMRF.

    Attributes
    ----------
    cond_cov : (n_vars, n_vars) SPD array
        Conditional covariance T of one site block given the rest.
    spatial_coef : (n_vars, n_vars) array
        Spatial coefficient F in the precision-side sign convention
        (conditional-mean weights are ``-F``).
    mean_design : (N * n_vars, q) array
        Design matrix mapping mean coefficients to the stacked mean.
    mean_coef : (q,) array
    """

    cond_cov: np.ndarray
    spatial_coef: np.ndarray
    mean_design: np.ndarray
    mean_coef: np.ndarray

    def __post_init__(self):
        self.cond_cov = np.atleast_2d(np.asarray(self.cond_cov, dtype=float))
        self.spatial_coef = np.atleast_2d(np.asarray(self.spatial_coef, dtype=float))
        self.mean_design = np.asarray(self.mean_design, dtype=float)
        self.mean_coef = np.atleast_1d(np.asarray(self.mean_coef, dtype=float))
        n = self.cond_cov.shape[0]
        if self.cond_cov.shape != (n, n) or self.spatial_coef.shape != (n, n):
            raise DimensionMismatch("cond_cov and spatial_coef must be square and same size")
        if not np.allclose(self.cond_cov, self.cond_cov.T):
            raise ValueError("cond_cov must be symmetric")
        if np.any(np.linalg.eigvalsh(self.cond_cov) <= 0):
            raise NotPositiveDefinite("cond_cov must be positive definite")
        if self.mean_design.shape[1] != self.mean_coef.shape[0]:
            raise DimensionMismatch("mean_design columns must match mean_coef length")
        if self.mean_design.shape[0] % n != 0:
            raise DimensionMismatch("mean_design rows must be a multiple of n_vars")

    @property
    def n_vars(self) -> int:
        return self.cond_cov.shape[0]

    @property
    def n_sites(self) -> int:
        return self.mean_design.shape[0] // self.n_vars

    @property
    def spatial_coef_reparam(self) -> np.ndarray:
        """Ft = T^{-1/2} F T^{1/2}."""
        half_inv = sym_sqrt(self.cond_cov, inverse=True)
        half = sym_sqrt(self.cond_cov)
        return half_inv @ self.spatial_coef @ half

    @property
    def mean(self) -> np.ndarray:
        return self.mean_design @ self.mean_coef

    @classmethod
    def from_reparam(cls, cond_cov, coef_reparam, mean_design, mean_coef) -> "GmrfSpec":
        """Build from the reparametrized coefficient Ft (F = T^{1/2} Ft T^{-1/2})."""
        cond_cov = np.atleast_2d(np.asarray(cond_cov, dtype=float))
        coef_reparam = np.atleast_2d(np.asarray(coef_reparam, dtype=float))
        half = sym_sqrt(cond_cov)
        half_inv = sym_sqrt(cond_cov, inverse=True)
        return cls(cond_cov, half @ coef_reparam @ half_inv, mean_design, mean_coef)

    @classmethod
    def from_association(cls, cond_cov, association, mean_design, mean_coef) -> "GmrfSpec":
        """Build from conditional-mean regression weights (F = -association)."""
        return cls(cond_cov, -np.atleast_2d(np.asarray(association, dtype=float)),
                   mean_design, mean_coef)


@dataclass
class JointGmrf:
    """Joint Gaussian law of one stacked loading column: N(mean, precision^{-1})."""

    mean: np.ndarray
    precision: sp.csr_matrix
    n_vars: int = 1
    _dense: np.ndarray = field(default=None, repr=False, compare=False)

    def dense_precision(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.precision.toarray()
        return self._dense

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _inner_interaction(w: AdjacencyMatrix, coef_reparam: np.ndarray) -> np.ndarray:
    """I + W_U kron Ft + W_L kron Ft' for the precision sandwich."""
    n_vars = coef_reparam.shape[0]
    w_up = np.triu(w.entries, 1).astype(float)
    inner = np.eye(w.n_sites * n_vars)
    inner += np.kron(w_up, coef_reparam)
    inner += np.kron(w_up.T, coef_reparam.T)
    return inner


def build_joint_precision(w: AdjacencyMatrix, spec: GmrfSpec) -> JointGmrf:
    """Assemble the joint precision of one loading column.

    Raises
    ------
    NotPositiveDefinite
        If the spatial coefficients lie outside the valid region.
    DimensionMismatch
        If the mean design does not cover n_sites * n_vars rows.
    """
    if spec.mean_design.shape[0] != w.n_sites * spec.n_vars:
        raise DimensionMismatch(
            f"mean design has {spec.mean_design.shape[0]} rows, "
            f"expected {w.n_sites * spec.n_vars}")
    half_inv = sym_sqrt(spec.cond_cov, inverse=True)
    inner = _inner_interaction(w, spec.spatial_coef_reparam)
    scale = np.kron(np.eye(w.n_sites), half_inv)
    precision = scale @ inner @ scale
    precision = 0.5 * (precision + precision.T)
    g = JointGmrf(mean=spec.mean, precision=sp.csr_matrix(precision), n_vars=spec.n_vars)
    g._dense = precision
    if not check_positive_definite(g):
        raise NotPositiveDefinite("joint GMRF precision is not positive definite")
    return g


def check_positive_definite(g: JointGmrf, tol: float = PD_TOL) -> bool:
    """True iff the smallest precision eigenvalue exceeds ``tol``."""
    vals = np.linalg.eigvalsh(g.dense_precision())
    return bool(vals[0] > tol)


def is_diagonally_dominant(precision: np.ndarray) -> bool:
    """Cheap sufficient PD pre-check: strict diagonal dominance."""
    precision = np.asarray(precision)
    off = np.abs(precision).sum(axis=1) - np.abs(np.diag(precision))
    return bool(np.all(np.diag(precision) > off))


def sample_gmrf(g: JointGmrf, rng: np.random.Generator) -> np.ndarray:
    """One exact draw from N(mean, precision^{-1}) via a Cholesky solve.

    The lattice sizes in play are small (tens of sites), so the factorization
    is done densely; the draw is a deterministic function of the normal
    deviates consumed from ``rng``.
    """
    q = g.dense_precision()
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure(f"precision Cholesky failed: {exc}") from exc
    z = rng.standard_normal(g.dim)
    from scipy.linalg import solve_triangular

    return g.mean + solve_triangular(chol.T, z, lower=False)


def conditional_correlation(spec: GmrfSpec) -> np.ndarray:
    """Conditional correlation matrix of one neighboring site pair given the rest.

    Returns the (2 * n_vars, 2 * n_vars) correlation of the stacked pair;
    the off-diagonal block carries the between-site conditional correlations.
    """
    t_inv = np.linalg.inv(spec.cond_cov)
    cross = t_inv @ spec.spatial_coef
    pair_precision = np.block([[t_inv, cross], [cross.T, t_inv]])
    pair_precision = 0.5 * (pair_precision + pair_precision.T)
    vals = np.linalg.eigvalsh(pair_precision)
    if vals[0] <= PD_TOL:
        raise NotPositiveDefinite("pair precision is not positive definite")
    cov = np.linalg.inv(pair_precision)
    d = 1.0 / np.sqrt(np.diag(cov))
    return cov * np.outer(d, d)
