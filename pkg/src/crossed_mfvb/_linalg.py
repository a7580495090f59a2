"""Small shared linear algebra helpers.

Square-root factors are used to encode Gaussian penalty terms as extra
rows of a least squares system: any factor F with F'F = M produces the
same normal equations, so the particular factor is a private choice.
We use Cholesky factors throughout.
"""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotPositiveDefiniteError

__all__ = [
    "chol_factor",
    "inv_chol_factor",
    "chol_lower",
    "symmetrize",
    "spd_logdet",
]


def symmetrize(mat):
    """Return the symmetric part (M + M') / 2."""
    return 0.5 * (mat + mat.T)


def chol_lower(mat, what="matrix"):
    """Lower Cholesky factor L with L L' = mat, after symmetrization.

    Raises NotPositiveDefiniteError instead of silently jittering; a
    failed factorization usually indicates a derivation bug upstream.
    """
    try:
        return np.linalg.cholesky(symmetrize(np.asarray(mat, dtype=float)))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc


def chol_factor(mat, what="matrix"):
    """Upper-triangular factor U with U'U = mat."""
    return chol_lower(mat, what).T


def inv_chol_factor(mat, what="matrix"):
    """Triangular factor F with F'F = inv(mat), without forming inv(mat).

    Computed as the inverse of the lower Cholesky factor by triangular
    back-substitution.
    """
    low = chol_lower(mat, what)
    return solve_triangular(low, np.eye(low.shape[0]), lower=True)


def spd_logdet(mat, what="matrix"):
    """log det of a symmetric positive definite matrix via Cholesky."""
    low = chol_lower(mat, what)
    return 2.0 * float(np.sum(np.log(np.diag(low))))
