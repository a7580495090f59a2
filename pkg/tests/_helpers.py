"""Shared builders for the test suite."""

import numpy as np

from crossed_mfvb.data import Cell, CrossedDataset
from crossed_mfvb.priors import PriorSpec


def random_dataset(m, mp, n, p=1, q=1, qp=1, seed=0, drop=(), noise=0.5):
    """Crossed dataset with standard normal designs and a planted signal."""
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=p)
    u = rng.normal(size=(m, q)) * 0.8
    up = rng.normal(size=(mp, qp)) * 0.8
    cells = {}
    for i in range(m):
        for ip in range(mp):
            if (i, ip) in drop:
                continue
            X = rng.normal(size=(n, p))
            Z = rng.normal(size=(n, q))
            Zp = rng.normal(size=(n, qp))
            y = X @ beta + Z @ u[i] + Zp @ up[ip] + noise * rng.normal(size=n)
            cells[(i, ip)] = Cell(y, X, Z, Zp)
    return CrossedDataset(m=m, mprime=mp, p=p, q=q, qprime=qp, cells=cells)


def prior_b(p, q, qp, scale=1e2, sigma_beta=1e4):
    return PriorSpec.family_b(
        mu_beta=np.zeros(p),
        Sigma_beta=sigma_beta * np.eye(p),
        nu_sigma2=1.0,
        s_sigma2=scale,
        nu_Sigma=2.0,
        s_Sigma=np.full(q, scale),
        nu_Sigma_prime=2.0,
        s_Sigma_prime=np.full(qp, scale),
    )


def prior_a(p, q, qp):
    return PriorSpec.family_a(
        mu_beta=np.zeros(p),
        Sigma_beta=1e4 * np.eye(p),
        xi_sigma2=1.0,
        lambda_sigma2=1.0,
        xi_Sigma=2 * q,
        Lambda_Sigma=np.eye(q),
        xi_Sigma_prime=2 * qp,
        Lambda_Sigma_prime=np.eye(qp),
    )
