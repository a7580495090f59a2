"""Streamlined best linear unbiased prediction for fixed covariances.

For known error variance and random-effect covariance matrices, the BLUP
of the fixed and random effects solves a generalized ridge system whose
penalty has no fixed-effect block.  The same two-level embedding used by
the restriction-III variational update applies: the dense columns carry
beta and the smaller grouping's effects, the block diagonal carries the
larger grouping's, and all the covariance blocks needed for pointwise
prediction intervals fall out of the solver.

Covariance parameters are inputs here; estimating them (e.g. by REML) is
out of scope.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import chol_lower, inv_chol_factor
from .data import get_views
from .lsq import TwoLevelSystem, solve_two_level

__all__ = ["CovarianceInputs", "BlupResult", "blup_fit"]


@dataclass(frozen=True)
class CovarianceInputs:
    """Known covariance parameters: error variance and both random-effect
    covariance matrices."""

    sigma2: float
    Sigma: np.ndarray
    Sigma_prime: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "Sigma", np.atleast_2d(np.asarray(self.Sigma, dtype=float)))
        object.__setattr__(
            self, "Sigma_prime", np.atleast_2d(np.asarray(self.Sigma_prime, dtype=float))
        )
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        chol_lower(self.Sigma, "Sigma")
        chol_lower(self.Sigma_prime, "Sigma_prime")


@dataclass(frozen=True)
class BlupResult:
    """Point predictions plus every covariance block needed for intervals.

    ``cov_u[i]`` and ``cov_uprime[ip]`` are prediction-error covariances
    Cov(u_hat - u); ``cross_*`` blocks are the matching expectations
    between estimator blocks.
    """

    beta_hat: np.ndarray
    cov_beta: np.ndarray
    u_hat: np.ndarray  # (m, q)
    cov_u: np.ndarray  # (m, q, q)
    uprime_hat: np.ndarray  # (m', q')
    cov_uprime: np.ndarray  # (m', q', q')
    cross_beta_u: np.ndarray  # (m, p, q)
    cross_beta_uprime: np.ndarray  # (m', p, q')
    cross_u_uprime: np.ndarray  # (m, q, m'q')


def _blup_system(views, cov):
    """Two-level system for the BLUP normal equations.

    Block i holds the i-th row stack scaled by 1/sigma, penalty rows for
    every u' block replicated with weight m^{-1/2}, and the u_i penalty
    rows.  There are no prior rows for beta: the fixed effects are
    unpenalised.  With every cell filled, block i has
    m'(n_cell + q') + q rows; empty cells simply drop their data rows.
    """
    m, mp, q, qp = views.m, views.mprime, views.q, views.qprime
    inv_sigma = 1.0 / np.sqrt(cov.sigma2)
    f_s = inv_chol_factor(cov.Sigma, "Sigma")  # f_s' f_s = Sigma^{-1}
    f_sp = inv_chol_factor(cov.Sigma_prime, "Sigma_prime")
    up_penalty = np.kron(np.eye(mp), f_sp) / np.sqrt(m)

    blocks = []
    for i in range(m):
        n_i = views.n_i[i]
        rows = n_i + mp * qp + q
        b_i = np.zeros(rows)
        b_i[:n_i] = inv_sigma * views.y_i[i]
        B_i = np.zeros((rows, views.p + mp * qp))
        B_i[:n_i, : views.p] = inv_sigma * views.X_i[i]
        B_i[:n_i, views.p :] = inv_sigma * views.Zp_bd_i[i]
        B_i[n_i : n_i + mp * qp, views.p :] = up_penalty
        Bdot_i = np.zeros((rows, q))
        Bdot_i[:n_i] = inv_sigma * views.Z_i[i]
        Bdot_i[n_i + mp * qp :] = f_s
        blocks.append((b_i, B_i, Bdot_i))
    return TwoLevelSystem(blocks)


def blup_fit(ds, cov):
    """Best linear unbiased predictions and their covariance blocks.

    Work and storage are linear in the larger grouping size for fixed
    block dimensions.  Raises RankDeficientError when the fixed effects
    are confounded with the crossed intercepts.
    """
    views = ds if hasattr(ds, "Zp_bd_i") else get_views(ds)
    if not isinstance(cov, CovarianceInputs):
        cov = CovarianceInputs(*cov)
    p, q, qp, mp = views.p, views.q, views.qprime, views.mprime
    sol = solve_two_level(_blup_system(views, cov))

    beta_hat = sol.x1[:p]
    cov_beta = sol.A11[:p, :p]
    uprime_hat = np.empty((mp, qp))
    cov_uprime = np.empty((mp, qp, qp))
    cross_beta_uprime = np.empty((mp, p, qp))
    for ip in range(mp):
        sl = slice(p + ip * qp, p + (ip + 1) * qp)
        uprime_hat[ip] = sol.x1[sl]
        cov_uprime[ip] = sol.A11[sl, sl]
        cross_beta_uprime[ip] = sol.A11[:p, sl]

    m = views.m
    u_hat = np.stack(sol.x2)
    cov_u = np.stack(sol.A22)
    cross_beta_u = np.empty((m, p, q))
    cross_u_uprime = np.empty((m, q, mp * qp))
    for i in range(m):
        cross_beta_u[i] = sol.A12[i][:p]
        cross_u_uprime[i] = sol.A12[i][p:].T

    return BlupResult(
        beta_hat=beta_hat,
        cov_beta=cov_beta,
        u_hat=u_hat,
        cov_u=cov_u,
        uprime_hat=uprime_hat,
        cov_uprime=cov_uprime,
        cross_beta_u=cross_beta_u,
        cross_beta_uprime=cross_beta_uprime,
        cross_u_uprime=cross_u_uprime,
    )
