"""Error-correction forms of the latent-factor VAR and cointegration ranks.

The joint factor process d(t) = [g(t); f(t)] follows a VAR(p) whose
coefficient matrices are upper block triangular (the exogenous block f never
loads on g).  The equivalent error-correction form is

    diff d(t) = L d(t-1) + sum_i S_i diff d(t-i) + e(t)

with long-run matrix L = -I + sum_i Phi_i and short-run matrices
S_i = -sum_{j>i} Phi_j; both inherit the block-triangular layout.

The long-run matrix factors into adjustment loadings and cointegration
vectors:

    L = [[ A B1',  A B2' + A2 Bf' ],
         [ 0,      Af Bf'         ]]

where (A, B1, B2) parameterize relations involving the whole of d and
(A2, Af, Bf) relations among the exogenous factors only.  Ranks of the five
block products classify the cointegration structure; following the
singular-value rule, a rank is the count of singular values above a
threshold (default 0.05).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BlockStructureViolation, DimensionMismatch, EmptyChain

RANK_THRESHOLD = 0.05

_RANK_NAMES = ("r_f", "r_d", "r_c", "r_c1", "r_c2")


def _check_block_triangular(mat: np.ndarray, m: int, label: str) -> None:
    if np.count_nonzero(mat[m:, :m]):
        raise BlockStructureViolation(f"{label} has a nonzero lower-left block")


@dataclass
class EcmForm:
    """Long-run and short-run coefficients with an (m, l) block split."""

    longrun: np.ndarray
    shortrun: list
    m: int

    def __post_init__(self):
        self.longrun = np.asarray(self.longrun, dtype=float)
        self.shortrun = [np.asarray(s, dtype=float) for s in self.shortrun]
        k = self.longrun.shape[0]
        if self.longrun.shape != (k, k):
            raise DimensionMismatch("longrun matrix must be square")
        if not 0 < self.m <= k:
            raise DimensionMismatch("block split m must lie in 1..dim")
        _check_block_triangular(self.longrun, self.m, "longrun")
        for i, s in enumerate(self.shortrun):
            if s.shape != (k, k):
                raise DimensionMismatch("shortrun matrices must match longrun size")
            _check_block_triangular(s, self.m, f"shortrun[{i}]")

    @property
    def dim(self) -> int:
        return self.longrun.shape[0]

    @property
    def l(self) -> int:
        return self.dim - self.m

    @property
    def order(self) -> int:
        """VAR order p implied by the number of short-run terms."""
        return len(self.shortrun) + 1


@dataclass
class EcmBlocks:
    """Block factorization of the ECM coefficients.

    Shapes (m endogenous factors, l exogenous, r_joint = max joint
    cointegration rank, r_exo = max exogenous rank):

    - adjust_joint   (m, r_joint)   loadings of the joint relations
    - coint_joint_endo (m, r_joint) endogenous rows of the joint vectors
    - coint_joint_exo  (l, r_joint) exogenous rows of the joint vectors
    - adjust_cross   (m, r_exo)     endogenous loadings of exogenous relations
    - adjust_exo     (l, r_exo)
    - coint_exo      (l, r_exo)
    - shortrun_endo  p-1 of (m, m+l)
    - shortrun_exo   p-1 of (l, l)
    - mix_joint      (r_joint, r_joint) SPD mixing matrix
    - mix_exo        (r_exo, r_exo) SPD mixing matrix

    The mixing matrices record the non-identified rotation used by the
    sampler; all rank products are invariant to them.
    """

    adjust_joint: np.ndarray
    coint_joint_endo: np.ndarray
    coint_joint_exo: np.ndarray
    adjust_cross: np.ndarray
    adjust_exo: np.ndarray
    coint_exo: np.ndarray
    shortrun_endo: list = field(default_factory=list)
    shortrun_exo: list = field(default_factory=list)
    mix_joint: np.ndarray = None
    mix_exo: np.ndarray = None

    def __post_init__(self):
        for name in ("adjust_joint", "coint_joint_endo", "coint_joint_exo",
                     "adjust_cross", "adjust_exo", "coint_exo"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.shortrun_endo = [np.asarray(k, dtype=float) for k in self.shortrun_endo]
        self.shortrun_exo = [np.asarray(k, dtype=float) for k in self.shortrun_exo]
        m, r_joint = self.adjust_joint.shape
        l, r_exo = self.adjust_exo.shape
        if self.coint_joint_endo.shape != (m, r_joint):
            raise DimensionMismatch("coint_joint_endo shape mismatch")
        if self.coint_joint_exo.shape != (l, r_joint):
            raise DimensionMismatch("coint_joint_exo shape mismatch")
        if self.adjust_cross.shape != (m, r_exo):
            raise DimensionMismatch("adjust_cross shape mismatch")
        if self.coint_exo.shape != (l, r_exo):
            raise DimensionMismatch("coint_exo shape mismatch")
        if len(self.shortrun_endo) != len(self.shortrun_exo):
            raise DimensionMismatch("shortrun lists must have equal length")
        for k in self.shortrun_endo:
            if k.shape != (m, m + l):
                raise DimensionMismatch("shortrun_endo matrices must be m x (m+l)")
        for k in self.shortrun_exo:
            if k.shape != (l, l):
                raise DimensionMismatch("shortrun_exo matrices must be l x l")
        if self.mix_joint is None:
            self.mix_joint = np.eye(r_joint)
        if self.mix_exo is None:
            self.mix_exo = np.eye(r_exo)

    @property
    def m(self) -> int:
        return self.adjust_joint.shape[0]

    @property
    def l(self) -> int:
        return self.adjust_exo.shape[0]

    @property
    def order(self) -> int:
        return len(self.shortrun_endo) + 1

    @property
    def coint_joint(self) -> np.ndarray:
        """Stacked joint cointegration vectors, (m+l, r_joint)."""
        return np.vstack([self.coint_joint_endo, self.coint_joint_exo])

    # Products whose ranks classify the cointegration structure.
    def product_joint(self) -> np.ndarray:
        """Rank -> r_d: relations loading on the endogenous equations."""
        return self.adjust_joint @ self.coint_joint.T

    def product_exo(self) -> np.ndarray:
        """Rank -> r_f: relations among the exogenous factors."""
        return self.adjust_exo @ self.coint_exo.T

    def product_cross_total(self) -> np.ndarray:
        """Rank -> r_c: full cross block linking the two processes."""
        return (self.adjust_joint @ self.coint_joint_exo.T
                + self.adjust_cross @ self.coint_exo.T)

    def product_cross_joint(self) -> np.ndarray:
        """Rank -> r_c1."""
        return self.adjust_joint @ self.coint_joint_exo.T

    def product_cross_exo(self) -> np.ndarray:
        """Rank -> r_c2."""
        return self.adjust_cross @ self.coint_exo.T

    @classmethod
    def zeros(cls, m: int, l: int, order: int = 1,
              r_joint: int = None, r_exo: int = None) -> "EcmBlocks":
        """All-zero blocks at the maximal ranks r_joint = m-1, r_exo = l-1."""
        r_joint = m - 1 if r_joint is None else r_joint
        r_exo = l - 1 if r_exo is None else r_exo
        return cls(
            adjust_joint=np.zeros((m, r_joint)),
            coint_joint_endo=np.zeros((m, r_joint)),
            coint_joint_exo=np.zeros((l, r_joint)),
            adjust_cross=np.zeros((m, r_exo)),
            adjust_exo=np.zeros((l, r_exo)),
            coint_exo=np.zeros((l, r_exo)),
            shortrun_endo=[np.zeros((m, m + l)) for _ in range(order - 1)],
            shortrun_exo=[np.zeros((l, l)) for _ in range(order - 1)],
        )


@dataclass(frozen=True)
class CointRanks:
    """Estimated cointegration ranks of one parameter draw."""

    r_f: int
    r_d: int
    r_c: int
    r_c1: int
    r_c2: int

    def as_tuple(self):
        return (self.r_f, self.r_d, self.r_c, self.r_c1, self.r_c2)


def var_to_ecm(phis, m: int) -> EcmForm:
    """Convert VAR level matrices to the error-correction form.

    longrun = -I + sum(phis); shortrun_i = -sum_{j>i} phis[j].
    """
    phis = [np.asarray(p, dtype=float) for p in phis]
    if not phis:
        raise DimensionMismatch("need at least one VAR matrix")
    k = phis[0].shape[0]
    for p in phis:
        if p.shape != (k, k):
            raise DimensionMismatch("VAR matrices must be square and equally sized")
        _check_block_triangular(p, m, "VAR matrix")
    longrun = -np.eye(k) + sum(phis)
    shortrun = [-sum(phis[j] for j in range(i + 1, len(phis)))
                for i in range(len(phis) - 1)]
    return EcmForm(longrun=longrun, shortrun=shortrun, m=m)


def ecm_to_var(ecm: EcmForm) -> list:
    """Inverse of :func:`var_to_ecm`; exact algebraic round-trip."""
    p = ecm.order
    k = ecm.dim
    if p == 1:
        return [np.eye(k) + ecm.longrun]
    phis = [np.eye(k) + ecm.longrun + ecm.shortrun[0]]
    for i in range(1, p - 1):
        phis.append(ecm.shortrun[i] - ecm.shortrun[i - 1])
    phis.append(-ecm.shortrun[p - 2])
    return phis


def blocks_to_ecm(blocks: EcmBlocks) -> EcmForm:
    """Reconstruct the ECM coefficients from their block factorization.

    The leading sign of the long-run matrix is absorbed into the adjustment
    blocks, so the assembly is a plain block stack.
    """
    m, l = blocks.m, blocks.l
    longrun = np.zeros((m + l, m + l))
    longrun[:m, :m] = blocks.product_joint()[:, :m]
    longrun[:m, m:] = blocks.product_joint()[:, m:] + blocks.product_cross_exo()
    longrun[m:, m:] = blocks.product_exo()
    shortrun = []
    for k_i, phi2_i in zip(blocks.shortrun_endo, blocks.shortrun_exo):
        s = np.zeros((m + l, m + l))
        s[:m, :] = k_i
        s[m:, m:] = phi2_i
        shortrun.append(s)
    return EcmForm(longrun=longrun, shortrun=shortrun, m=m)


def rank_estimate(matrix_draw: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    """Count of singular values strictly greater than ``threshold``."""
    matrix_draw = np.asarray(matrix_draw, dtype=float)
    if matrix_draw.size == 0:
        return 0
    svals = np.linalg.svd(matrix_draw, compute_uv=False)
    return int(np.sum(svals > threshold))


def draw_ranks(blocks: EcmBlocks, threshold: float = RANK_THRESHOLD) -> CointRanks:
    """Cointegration ranks of one draw via the singular-value rule."""
    return CointRanks(
        r_f=rank_estimate(blocks.product_exo(), threshold),
        r_d=rank_estimate(blocks.product_joint(), threshold),
        r_c=rank_estimate(blocks.product_cross_total(), threshold),
        r_c1=rank_estimate(blocks.product_cross_joint(), threshold),
        r_c2=rank_estimate(blocks.product_cross_exo(), threshold),
    )


def rank_posterior(draws, threshold: float = RANK_THRESHOLD) -> dict:
    """Tabulate posterior rank frequencies over a chain of block draws.

    ``draws`` may be a PosteriorDraws object or any iterable of EcmBlocks.
    Returns a dict mapping each rank name to a frequency array indexed by
    rank value 0..max; each array sums to one.
    """
    params = getattr(draws, "params", draws)
    blocks = [getattr(p, "ecm", p) for p in params]
    if not blocks:
        raise EmptyChain("no draws to tabulate")
    ranks = np.array([draw_ranks(b, threshold).as_tuple() for b in blocks])
    n_max = int(ranks.max()) if ranks.size else 0
    table = {}
    for j, name in enumerate(_RANK_NAMES):
        counts = np.bincount(ranks[:, j], minlength=n_max + 1).astype(float)
        table[name] = counts / counts.sum()
    return table


def rank_posterior_mode(table: dict) -> dict:
    """Most probable rank per quantity from a rank_posterior table."""
    return {name: int(np.argmax(probs)) for name, probs in table.items()}
