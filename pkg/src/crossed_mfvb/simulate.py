"""Data generation for the simulation studies.

Every cell's design matrices share the intercept-plus-uniform-predictor
layout used throughout the numerical experiments: a column of ones
followed by independent Uniform(0, 1) columns, with X, Z and Z' reading
their leading columns off the same predictor draw.
"""

from dataclasses import dataclass, field

import numpy as np

from ._linalg import chol_lower
from .data import Cell, CrossedDataset
from .errors import ShapeMismatchError

__all__ = ["TrueParams", "simulate", "draw_group_effects"]


@dataclass(frozen=True)
class TrueParams:
    """Generating parameters and dimensions for one simulated dataset."""

    beta: np.ndarray
    sigma2: float
    Sigma: np.ndarray
    Sigma_prime: np.ndarray
    m: int
    mprime: int
    n_per_cell: int
    p: int = 2
    q: int = 2
    qprime: int = 2

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "Sigma", np.atleast_2d(np.asarray(self.Sigma, dtype=float)))
        object.__setattr__(
            self, "Sigma_prime", np.atleast_2d(np.asarray(self.Sigma_prime, dtype=float))
        )
        if min(self.m, self.mprime, self.n_per_cell, self.p, self.q, self.qprime) < 1:
            raise ShapeMismatchError("all dimensions must be at least 1")
        if self.m < self.mprime:
            raise ShapeMismatchError("grouping sizes must satisfy m >= m'")
        if self.beta.shape != (self.p,):
            raise ShapeMismatchError("beta length must equal p")
        if self.Sigma.shape != (self.q, self.q):
            raise ShapeMismatchError("Sigma must be q x q")
        if self.Sigma_prime.shape != (self.qprime, self.qprime):
            raise ShapeMismatchError("Sigma_prime must be q' x q'")
        if not self.sigma2 > 0:
            raise ShapeMismatchError("sigma2 must be positive")
        chol_lower(self.Sigma, "Sigma")
        chol_lower(self.Sigma_prime, "Sigma_prime")

    @staticmethod
    def paper_defaults(m=100, mprime=20, n_per_cell=10):
        """The simulation-study configuration: two-dimensional effects with
        negatively correlated intercept/slope deviations."""
        return TrueParams(
            beta=np.array([0.58, 1.89]),
            sigma2=0.3,
            Sigma=np.array([[0.46, -0.19], [-0.19, 0.17]]),
            Sigma_prime=np.array([[0.3, -0.12], [-0.12, 0.25]]),
            m=m,
            mprime=mprime,
            n_per_cell=n_per_cell,
        )


def draw_group_effects(cov, count, rng):
    """Draw ``count`` iid N(0, cov) vectors; deterministic given the rng."""
    cov = np.atleast_2d(cov)
    low = chol_lower(cov, "effect covariance")
    return rng.normal(size=(count, cov.shape[0])) @ low.T


def simulate(tp, seed):
    """Generate one crossed dataset from the true parameters.

    Group effects are drawn first (u then u'), then cells are filled in
    (i ascending, i' ascending) order, so the output is a deterministic
    function of (tp, seed).
    """
    rng = np.random.default_rng(np.random.Philox(key=seed))
    u = draw_group_effects(tp.Sigma, tp.m, rng)
    up = draw_group_effects(tp.Sigma_prime, tp.mprime, rng)
    width = max(tp.p, tp.q, tp.qprime)
    sd = np.sqrt(tp.sigma2)

    cells = {}
    for i in range(tp.m):
        for ip in range(tp.mprime):
            n = tp.n_per_cell
            W = np.ones((n, width))
            if width > 1:
                W[:, 1:] = rng.uniform(size=(n, width - 1))
            X = W[:, : tp.p]
            Z = W[:, : tp.q]
            Zp = W[:, : tp.qprime]
            y = X @ tp.beta + Z @ u[i] + Zp @ up[ip] + sd * rng.normal(size=n)
            cells[(i, ip)] = Cell(y, X, Z, Zp)
    return CrossedDataset(
        m=tp.m, mprime=tp.mprime, p=tp.p, q=tp.q, qprime=tp.qprime, cells=cells
    )
