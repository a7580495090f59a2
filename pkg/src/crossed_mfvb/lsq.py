"""QR-based least squares kernels.

Two solvers live here:

* ``solve_least_squares`` -- dense minimisation of ||b - Bx||^2 returning
  both the solution and (B'B)^{-1}.
* ``solve_two_level`` -- the same problem for a design matrix whose left
  block column is dense and whose right part is block diagonal.  Work and
  storage are linear in the number of blocks for fixed block sizes.

Neither solver ever forms B'B on the solve path: everything goes through
orthogonal (Householder QR) factors and triangular back-substitution.  The
only explicitly formed product is the small R^{-1} R^{-T} giving the
requested Gram inverse blocks.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_triangular

from .errors import RankDeficientError, ShapeMismatchError

__all__ = [
    "LeastSquaresProblem",
    "TwoLevelBlock",
    "TwoLevelSystem",
    "TwoLevelSolution",
    "solve_least_squares",
    "solve_two_level",
]

# A triangular diagonal entry below this multiple of the largest one is
# treated as an exact zero, i.e. a rank deficiency.
RANK_RTOL = 1e-12

_f64 = np.empty(0, dtype=np.float64)
_geqrf, _ormqr = get_lapack_funcs(("geqrf", "ormqr"), (_f64,))


def _qr(a, overwrite=False):
    """Householder QR of ``a``; returns (raw factors, tau, R).

    ``overwrite`` may only be set for scratch buffers this module owns.
    """
    a = np.asfortranarray(a, dtype=np.float64)
    # 64 columns of workspace covers the blocked algorithm's optimum; this
    # avoids a second wrapper call for the lwork query.
    qr, tau, work, info = _geqrf(a, lwork=64 * max(1, a.shape[1]), overwrite_a=overwrite)
    if info != 0:
        raise RuntimeError(f"geqrf failed with info={info}")
    k = min(a.shape)
    return qr, tau, np.triu(qr[:k, : a.shape[1]])


def _apply_qt(qr, tau, c, overwrite=False):
    """Apply Q' (from ``_qr``) to a vector or matrix ``c``."""
    c2 = c[:, None] if c.ndim == 1 else c
    c2 = np.asfortranarray(c2, dtype=np.float64)
    cq, work, info = _ormqr(
        "L", "T", qr, tau, c2, lwork=64 * max(1, c2.shape[1]), overwrite_c=overwrite
    )
    if info != 0:
        raise RuntimeError(f"ormqr failed with info={info}")
    return cq[:, 0] if c.ndim == 1 else cq


def _check_rank(r, what):
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return
    top = np.max(diag)
    if top == 0.0 or np.min(diag) < RANK_RTOL * top:
        raise RankDeficientError(f"{what} is rank deficient (unidentifiable system)")


@dataclass(frozen=True)
class LeastSquaresProblem:
    """Overdetermined least squares data: minimise ||b - Bx||^2.

    ``B`` must have at least as many rows as columns; full column rank is
    checked at solve time via the triangular factor diagonal.
    """

    b: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2:
            raise ShapeMismatchError("B must be a matrix")
        if b.shape[0] != B.shape[0]:
            raise ShapeMismatchError(
                f"b has {b.shape[0]} rows but B has {B.shape[0]}"
            )
        if B.shape[0] < B.shape[1]:
            raise ShapeMismatchError(
                f"underdetermined system: {B.shape[0]} rows < {B.shape[1]} columns"
            )
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "B", B)


def solve_least_squares(prob):
    """Solve min_x ||b - Bx||^2 and return (x, (B'B)^{-1}).

    Accepts a LeastSquaresProblem or a (b, B) pair.  The Gram inverse is
    obtained from the triangular QR factor as R^{-1} R^{-T}; B'B itself is
    never formed.

    Raises RankDeficientError when B is numerically column rank deficient.
    """
    if not isinstance(prob, LeastSquaresProblem):
        prob = LeastSquaresProblem(*prob)
    ncol = prob.B.shape[1]
    qr, tau, r = _qr(prob.B)
    _check_rank(r, "least squares design")
    c1 = _apply_qt(qr, tau, prob.b)[:ncol]
    x = solve_triangular(r, c1)
    r_inv = solve_triangular(r, np.eye(ncol))
    gram_inverse = r_inv @ r_inv.T
    return x, gram_inverse


@dataclass(frozen=True)
class TwoLevelBlock:
    """One block row (b_i, B_i, Bdot_i) of a two-level system."""

    b: np.ndarray
    B: np.ndarray
    Bdot: np.ndarray


@dataclass(frozen=True)
class TwoLevelSystem:
    """Least squares data whose design matrix stacks dense left blocks B_i
    next to block diagonal right blocks Bdot_i.

    All B_i share a column count p_c and all Bdot_i share q_c.  Each block
    needs at least q_c rows, and the rows left over after eliminating every
    block must cover the p_c dense columns so the assembled system is
    overdetermined.
    """

    blocks: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ShapeMismatchError("a two-level system needs at least one block")
        norm = []
        for k, blk in enumerate(self.blocks):
            if not isinstance(blk, TwoLevelBlock):
                blk = TwoLevelBlock(*blk)
            b = np.asarray(blk.b, dtype=float).reshape(-1)
            B = np.asarray(blk.B, dtype=float)
            Bdot = np.asarray(blk.Bdot, dtype=float)
            if B.ndim != 2 or Bdot.ndim != 2:
                raise ShapeMismatchError(f"block {k}: B and Bdot must be matrices")
            n = b.shape[0]
            if B.shape[0] != n or Bdot.shape[0] != n:
                raise ShapeMismatchError(f"block {k}: row counts differ")
            norm.append(TwoLevelBlock(b, B, Bdot))
        p_c = norm[0].B.shape[1]
        q_c = norm[0].Bdot.shape[1]
        for k, blk in enumerate(norm):
            if blk.B.shape[1] != p_c or blk.Bdot.shape[1] != q_c:
                raise ShapeMismatchError(f"block {k}: inconsistent column counts")
            if blk.b.shape[0] < q_c:
                raise ShapeMismatchError(f"block {k}: fewer rows than Bdot columns")
        if sum(blk.b.shape[0] - q_c for blk in norm) < p_c:
            raise ShapeMismatchError("assembled system is underdetermined")
        object.__setattr__(self, "blocks", norm)

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def p_c(self):
        return self.blocks[0].B.shape[1]

    @property
    def q_c(self):
        return self.blocks[0].Bdot.shape[1]

    def assemble(self):
        """Materialise the full (b, B) pair.  For oracles and tests only."""
        p_c, q_c, m = self.p_c, self.q_c, self.n_blocks
        rows = sum(blk.b.shape[0] for blk in self.blocks)
        B = np.zeros((rows, p_c + m * q_c))
        b = np.zeros(rows)
        at = 0
        for k, blk in enumerate(self.blocks):
            n = blk.b.shape[0]
            b[at : at + n] = blk.b
            B[at : at + n, :p_c] = blk.B
            B[at : at + n, p_c + k * q_c : p_c + (k + 1) * q_c] = blk.Bdot
            at += n
        return b, B


@dataclass(frozen=True)
class TwoLevelSolution:
    """Solution pieces of a two-level system.

    ``x1``/``A11`` cover the dense columns; per block, ``x2[i]``, ``A22[i]``
    and ``A12[i]`` are the block solution, its Gram inverse diagonal block,
    and the dense-to-block off-diagonal block of (B'B)^{-1}.

    ``logdet_gram_x1`` is log det of the Schur complement whose inverse is
    A11, and ``logdet_gram_blocks`` is the sum of log det(Bdot_i' Bdot_i);
    together they give log det(B'B) cheaply from the triangular factors.
    """

    x1: np.ndarray
    A11: np.ndarray
    x2: list
    A22: list
    A12: list
    logdet_gram_x1: float
    logdet_gram_blocks: float


def solve_two_level(sys):
    """Solve a two-level sparse least squares system.

    Per block, a QR factorisation of Bdot_i splits the rows into a part
    carrying the block unknowns and a remainder; remainders accumulate, in
    block input order, into a reduced system for the dense unknowns which is
    solved by a second QR.  Block solutions follow by back-substitution.

    Returns a TwoLevelSolution whose fields equal the corresponding
    sub-blocks of the dense solution of the assembled system.

    Raises RankDeficientError if any per-block factor or the reduced factor
    is singular, and ShapeMismatchError for inconsistent inputs.
    """
    if not isinstance(sys, TwoLevelSystem):
        sys = TwoLevelSystem(sys)
    m, p_c, q_c = sys.n_blocks, sys.p_c, sys.q_c

    reduced_rows = sum(blk.b.shape[0] - q_c for blk in sys.blocks)
    omega3 = np.empty(reduced_rows)
    omega4 = np.empty((reduced_rows, p_c), order="F")
    r_blocks = []
    c1_blocks = []
    C1_blocks = []
    logdet_blocks = 0.0

    at = 0
    for k, blk in enumerate(sys.blocks):
        qr, tau, r_i = _qr(blk.Bdot)
        _check_rank(r_i, f"block {k} factor")
        logdet_blocks += 2.0 * float(np.sum(np.log(np.abs(np.diag(r_i)))))
        scratch = np.empty((blk.b.shape[0], 1 + p_c), order="F")
        scratch[:, 0] = blk.b
        scratch[:, 1:] = blk.B
        work = _apply_qt(qr, tau, scratch, overwrite=True)
        c1_blocks.append(work[:q_c, 0].copy())
        C1_blocks.append(work[:q_c, 1:].copy())
        n_rest = blk.b.shape[0] - q_c
        omega3[at : at + n_rest] = work[q_c:, 0]
        omega4[at : at + n_rest] = work[q_c:, 1:]
        r_blocks.append(r_i)
        at += n_rest

    qr, tau, r = _qr(omega4, overwrite=True)
    _check_rank(r, "reduced dense factor")
    c = _apply_qt(qr, tau, omega3)[:p_c]
    x1 = solve_triangular(r, c)
    r_inv = solve_triangular(r, np.eye(p_c))
    A11 = r_inv @ r_inv.T
    A11 = 0.5 * (A11 + A11.T)
    logdet_x1 = 2.0 * float(np.sum(np.log(np.abs(np.diag(r)))))

    x2, A22, A12 = [], [], []
    eye_q = np.eye(q_c)
    for k in range(m):
        r_i, c1_i, C1_i = r_blocks[k], c1_blocks[k], C1_blocks[k]
        x2.append(solve_triangular(r_i, c1_i - C1_i @ x1))
        a12 = -A11 @ solve_triangular(r_i, C1_i).T
        r_inv_t = solve_triangular(r_i, eye_q, trans="T")
        a22 = solve_triangular(r_i, r_inv_t - C1_i @ a12)
        A12.append(a12)
        A22.append(0.5 * (a22 + a22.T))

    return TwoLevelSolution(
        x1=x1,
        A11=A11,
        x2=x2,
        A22=A22,
        A12=A12,
        logdet_gram_x1=logdet_x1,
        logdet_gram_blocks=logdet_blocks,
    )
