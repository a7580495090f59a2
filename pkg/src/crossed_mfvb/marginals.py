"""Closed-form and Monte Carlo marginals of the fitted q-distribution.

Effect coordinates are Gaussian, so they evaluate exactly.  The error
variance is inverse chi-squared, and the diagonal entries of an
inverse-Wishart covariance matrix are marginally inverse chi-squared as
well, so standard deviations transform analytically.  Correlations have
no tractable marginal and fall back to Monte Carlo draws.
"""

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .oracle import sample_inverse_wishart

__all__ = [
    "gaussian_pdf",
    "invchisq_pdf",
    "sd_pdf_from_invchisq",
    "invchisq_quantile",
    "diag_marginal_invchisq",
    "sigma_marginal",
    "sd_marginal",
    "rho_draws",
    "sigma2_draws",
]


def gaussian_pdf(grid, mean, var):
    z = (np.asarray(grid) - mean) ** 2 / var
    return np.exp(-0.5 * z) / np.sqrt(2 * np.pi * var)


def invchisq_pdf(x, shape, scale):
    """Density of the scaled inverse chi-squared (scale / x ~ chi2_shape)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    log_pdf = (
        0.5 * shape * np.log(0.5 * scale)
        - gammaln(0.5 * shape)
        - (0.5 * shape + 1.0) * np.log(x[pos])
        - 0.5 * scale / x[pos]
    )
    out[pos] = np.exp(log_pdf)
    return out


def sd_pdf_from_invchisq(s, shape, scale):
    """Density of sqrt(v) when v is inverse chi-squared."""
    s = np.asarray(s, dtype=float)
    return invchisq_pdf(s**2, shape, scale) * 2.0 * np.abs(s)


def invchisq_quantile(prob, shape, scale):
    """Quantile of the scaled inverse chi-squared distribution."""
    return scale / chi2.ppf(1.0 - np.asarray(prob), shape)


def diag_marginal_invchisq(xi, Lambda, index):
    """Marginal of one diagonal entry of an Inverse-G-Wishart(full) matrix.

    Sigma_kk is inverse chi-squared with shape xi - 2d + 2 and scale
    Lambda_kk, where d is the matrix dimension.
    """
    Lambda = np.atleast_2d(Lambda)
    d = Lambda.shape[0]
    return xi - 2 * d + 2, float(Lambda[index, index])


def sigma_marginal(grid, xi, lam):
    """Density of sigma = sqrt(sigma^2) under q(sigma^2)."""
    return sd_pdf_from_invchisq(grid, xi, lam)


def sd_marginal(grid, xi, Lambda, index):
    """Density of sqrt(Sigma_kk) under an Inverse-G-Wishart q-density."""
    shape, scale = diag_marginal_invchisq(xi, Lambda, index)
    return sd_pdf_from_invchisq(grid, shape, scale)


def sigma2_draws(rng, xi, lam, size):
    return lam / rng.chisquare(xi, size=size)


def rho_draws(rng, xi, Lambda, row, col, size):
    """Monte Carlo draws of a correlation under an Inverse-G-Wishart."""
    out = np.empty(size)
    for k in range(size):
        S = sample_inverse_wishart(rng, xi, Lambda)
        out[k] = S[row, col] / np.sqrt(S[row, row] * S[col, col])
    return out
