"""Independent verification machinery.

Everything in here exists to check the streamlined code paths against
slower but transparent alternatives:

* ``dense_mfvb_update`` mirrors each effects update as a literal dense
  generalized-ridge solve with explicit inversion, in the same coordinate
  order, restricted to small problems;
* ``gibbs_sample`` runs a blocked Gibbs sampler over the exact posterior,
  the reference for accuracy scoring;
* ``kde`` and ``accuracy`` turn draws into density estimates and into the
  total-variation-based accuracy score.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from ._linalg import chol_lower, spd_logdet, symmetrize
from .data import get_views
from .engine import ProductRestriction
from .errors import (
    DegenerateSampleError,
    DimensionGuardError,
    GridMismatchError,
    ShapeMismatchError,
)

__all__ = [
    "dense_design",
    "dense_mfvb_update",
    "GibbsDraws",
    "gibbs_sample",
    "silverman_bandwidth",
    "kde",
    "kde_grid",
    "accuracy",
    "sample_inverse_wishart",
    "sample_inverse_chisq",
    "integrated_autocorr_time",
    "mc_standard_error",
]

DENSE_DIM_GUARD = 200


def dense_design(ds):
    """Full response vector and design blocks [X | Z-blocks | Z'-blocks].

    Returns (y, X, Zu, Zup) where Zu is the n x (mq) block diagonal of the
    per-i row stacks and Zup the n x (m'q') stack of the block-diagonal
    arrangements.  Oracle use only; this densifies everything.
    """
    v = get_views(ds)
    n, m, q = v.n_total, v.m, v.q
    Zu = np.zeros((n, m * q))
    Zup = np.zeros((n, v.mprime * v.qprime))
    at = 0
    for i in range(m):
        rows = slice(at, at + v.n_i[i])
        Zu[rows, i * q : (i + 1) * q] = v.Z_i[i]
        Zup[rows] = v.Zp_bd_i[i]
        at += v.n_i[i]
    return v.y, v.X, Zu, Zup


def _guard(ds):
    dim = ds.p + ds.m * ds.q + ds.mprime * ds.qprime
    if dim > DENSE_DIM_GUARD:
        raise DimensionGuardError(
            f"dense oracle limited to {DENSE_DIM_GUARD} unknowns, got {dim}"
        )
    return dim


def dense_mfvb_update(ds, priors, restriction, state):
    """One effects update computed densely, mirroring the streamlined order.

    Restriction III solves the full generalized-ridge system in one shot;
    restriction II solves the joint (beta, u) system and then each u'
    block; restriction I updates beta, each u_i, then each u' block.  The
    cross blocks that the restriction zeroes are simply never read from
    the dense covariance.  Everything uses explicit inverses, so this is
    O((p + mq + m'q')^3) and guarded to small instances.
    """
    _guard(ds)
    restriction = ProductRestriction(restriction)
    p, q, qp, m, mp = ds.p, ds.q, ds.qprime, ds.m, ds.mprime
    y, X, Zu, Zup = dense_design(ds)
    mu = state.mu_recip_sigma2
    sigma_beta_inv = np.linalg.inv(priors.Sigma_beta)
    o_beta = sigma_beta_inv @ priors.mu_beta

    new = {}
    if restriction == ProductRestriction.PR3:
        C = np.hstack([X, Zu, Zup])
        D = np.zeros((C.shape[1],) * 2)
        D[:p, :p] = sigma_beta_inv
        for i in range(m):
            sl = slice(p + i * q, p + (i + 1) * q)
            D[sl, sl] = state.M_Sigma_inv
        for ip in range(mp):
            sl = slice(p + m * q + ip * qp, p + m * q + (ip + 1) * qp)
            D[sl, sl] = state.M_Sigma_prime_inv
        o = np.zeros(C.shape[1])
        o[:p] = o_beta
        cov = np.linalg.inv(mu * (C.T @ C) + D)
        mean = cov @ (mu * (C.T @ y) + o)

        new["mu_beta"] = mean[:p]
        new["Sigma_beta"] = symmetrize(cov[:p, :p])
        new["mu_u"] = mean[p : p + m * q].reshape(m, q)
        new["Sigma_u"] = np.stack(
            [symmetrize(cov[p + i * q : p + (i + 1) * q, p + i * q : p + (i + 1) * q]) for i in range(m)]
        )
        off = p + m * q
        new["mu_up"] = mean[off:].reshape(mp, qp)
        new["Sigma_up"] = np.stack(
            [symmetrize(cov[off + ip * qp : off + (ip + 1) * qp, off + ip * qp : off + (ip + 1) * qp]) for ip in range(mp)]
        )
        new["cross_beta_u"] = np.stack(
            [cov[:p, p + i * q : p + (i + 1) * q] for i in range(m)]
        )
        new["cross_beta_up"] = np.stack(
            [cov[:p, off + ip * qp : off + (ip + 1) * qp] for ip in range(mp)]
        )
        new["cross_u_up"] = np.stack(
            [cov[p + i * q : p + (i + 1) * q, off:] for i in range(m)]
        )
        new["logdet_joint_cov"] = np.linalg.slogdet(cov)[1]
    elif restriction == ProductRestriction.PR2:
        C = np.hstack([X, Zu])
        D = np.zeros((C.shape[1],) * 2)
        D[:p, :p] = sigma_beta_inv
        for i in range(m):
            sl = slice(p + i * q, p + (i + 1) * q)
            D[sl, sl] = state.M_Sigma_inv
        o = np.zeros(C.shape[1])
        o[:p] = o_beta
        target = y - Zup @ state.mu_up.reshape(-1)
        cov = np.linalg.inv(mu * (C.T @ C) + D)
        mean = cov @ (mu * (C.T @ target) + o)
        new["mu_beta"] = mean[:p]
        new["Sigma_beta"] = symmetrize(cov[:p, :p])
        new["mu_u"] = mean[p:].reshape(m, q)
        new["Sigma_u"] = np.stack(
            [symmetrize(cov[p + i * q : p + (i + 1) * q, p + i * q : p + (i + 1) * q]) for i in range(m)]
        )
        new["cross_beta_u"] = np.stack(
            [cov[:p, p + i * q : p + (i + 1) * q] for i in range(m)]
        )
        mu_up, Sigma_up = _dense_uprime(ds, state, new["mu_beta"], new["mu_u"])
        new["mu_up"], new["Sigma_up"] = mu_up, Sigma_up
        new["logdet_joint_cov"] = np.linalg.slogdet(cov)[1] + sum(
            spd_logdet(Sigma_up[ip]) for ip in range(mp)
        )
    else:
        r = y - Zu @ state.mu_u.reshape(-1) - Zup @ state.mu_up.reshape(-1)
        cov_b = np.linalg.inv(mu * (X.T @ X) + sigma_beta_inv)
        mu_beta = cov_b @ (mu * (X.T @ r) + o_beta)
        new["mu_beta"], new["Sigma_beta"] = mu_beta, symmetrize(cov_b)

        v = get_views(ds)
        mu_u = np.empty((m, q))
        Sigma_u = np.empty((m, q, q))
        up_flat = state.mu_up.reshape(-1)
        for i in range(m):
            r_i = v.y_i[i] - v.X_i[i] @ mu_beta - v.Zp_bd_i[i] @ up_flat
            prec = mu * (v.Z_i[i].T @ v.Z_i[i]) + state.M_Sigma_inv
            Sigma_u[i] = symmetrize(np.linalg.inv(prec))
            mu_u[i] = Sigma_u[i] @ (mu * (v.Z_i[i].T @ r_i))
        new["mu_u"], new["Sigma_u"] = mu_u, Sigma_u

        mu_up, Sigma_up = _dense_uprime(ds, state, mu_beta, mu_u)
        new["mu_up"], new["Sigma_up"] = mu_up, Sigma_up
        new["logdet_joint_cov"] = (
            spd_logdet(new["Sigma_beta"])
            + sum(spd_logdet(Sigma_u[i]) for i in range(m))
            + sum(spd_logdet(Sigma_up[ip]) for ip in range(mp))
        )

    return replace(state, **new)


def _dense_uprime(ds, state, mu_beta, mu_u):
    v = get_views(ds)
    mu = state.mu_recip_sigma2
    qp, mp = ds.qprime, ds.mprime
    mu_up = np.empty((mp, qp))
    Sigma_up = np.empty((mp, qp, qp))
    for ip in range(mp):
        resid = v.y_ip[ip] - v.X_ip[ip] @ mu_beta
        for i, start, stop in v.cells_in_ip[ip]:
            resid[start:stop] -= v.Z_ip[ip][start:stop] @ mu_u[i]
        prec = mu * (v.Zp_ip[ip].T @ v.Zp_ip[ip]) + state.M_Sigma_prime_inv
        Sigma_up[ip] = symmetrize(np.linalg.inv(prec))
        mu_up[ip] = Sigma_up[ip] @ (mu * (v.Zp_ip[ip].T @ resid))
    return mu_up, Sigma_up


def sample_inverse_chisq(rng, shape, scale, size=None):
    """Draw from the scaled inverse chi-squared with our shape/scale
    convention: scale / x is chi-squared with ``shape`` degrees of freedom."""
    return scale / rng.chisquare(shape, size=size)


def sample_inverse_wishart(rng, shape, scale):
    """Draw from Inverse-G-Wishart(full graph, shape, scale).

    Equivalent to an Inverse-Wishart with degrees of freedom
    shape - d + 1; sampled by the Bartlett construction so the draw is a
    deterministic function of the generator state.
    """
    scale = np.atleast_2d(scale)
    d = scale.shape[0]
    df = shape - d + 1
    if df <= d - 1:
        raise ValueError("shape parameter too small for a proper draw")
    bart = np.zeros((d, d))
    for j in range(d):
        bart[j, j] = np.sqrt(rng.chisquare(df - j))
        bart[j, :j] = rng.normal(size=j)
    l_scale = chol_lower(scale, "inverse-Wishart scale")
    v = solve_triangular(bart, l_scale.T, lower=True)
    return symmetrize(v.T @ v)


@dataclass
class GibbsDraws:
    """Retained draws from the blocked Gibbs sampler, one row per sweep."""

    beta: np.ndarray  # (R, p)
    u: np.ndarray  # (R, m, q)
    uprime: np.ndarray  # (R, m', q')
    sigma2: np.ndarray  # (R,)
    Sigma: np.ndarray  # (R, q, q)
    Sigma_prime: np.ndarray  # (R, q', q')
    a_sigma2: np.ndarray | None
    A_Sigma: np.ndarray | None  # (R, q) diagonals
    A_Sigma_prime: np.ndarray | None
    warmup: int
    retained: int
    seed: int

    def __post_init__(self):
        if self.retained < 100:
            raise ShapeMismatchError("keep at least 100 draws for density work")


def gibbs_sample(ds, priors, warmup, retained, seed):
    """Blocked Gibbs sampler for the exact posterior on a small instance.

    Per sweep: (beta, u, u') jointly from their Gaussian full conditional,
    then the error variance, then each covariance matrix, then (family B)
    the auxiliary variables from their inverse chi-squared conditionals.
    Deterministic given the seed.
    """
    _guard(ds)
    if retained < 100:
        raise ShapeMismatchError("keep at least 100 draws for density work")
    p, q, qp, m, mp = ds.p, ds.q, ds.qprime, ds.m, ds.mprime
    y, X, Zu, Zup = dense_design(ds)
    C = np.hstack([X, Zu, Zup])
    CtC = C.T @ C
    Cty = C.T @ y
    n_total = y.shape[0]
    dim = C.shape[1]
    sigma_beta_inv = np.linalg.inv(priors.Sigma_beta)
    o = np.zeros(dim)
    o[:p] = sigma_beta_inv @ priors.mu_beta

    rng = np.random.default_rng(np.random.Philox(key=seed))
    family_b = priors.family == "B"

    sigma2, Sigma, Sigma_p = 1.0, np.eye(q), np.eye(qp)
    a_sig = 1.0
    A_diag = np.ones(q)
    A_diag_p = np.ones(qp)

    out_beta = np.empty((retained, p))
    out_u = np.empty((retained, m, q))
    out_up = np.empty((retained, mp, qp))
    out_s2 = np.empty(retained)
    out_S = np.empty((retained, q, q))
    out_Sp = np.empty((retained, qp, qp))
    out_a = np.empty(retained) if family_b else None
    out_A = np.empty((retained, q)) if family_b else None
    out_Ap = np.empty((retained, qp)) if family_b else None

    for sweep in range(warmup + retained):
        try:
            Sigma_inv = np.linalg.inv(Sigma)
            Sigma_p_inv = np.linalg.inv(Sigma_p)
            D = np.zeros((dim, dim))
            D[:p, :p] = sigma_beta_inv
            for i in range(m):
                sl = slice(p + i * q, p + (i + 1) * q)
                D[sl, sl] = Sigma_inv
            for ip in range(mp):
                sl = slice(p + m * q + ip * qp, p + m * q + (ip + 1) * qp)
                D[sl, sl] = Sigma_p_inv
            prec = CtC / sigma2 + D
            low = chol_lower(prec, "effects full-conditional precision")
            mean = cho_solve((low, True), Cty / sigma2 + o)
            theta = mean + solve_triangular(low, rng.normal(size=dim), lower=True, trans="T")

            resid = y - C @ theta
            rss = float(resid @ resid)
            u_mat = theta[p : p + m * q].reshape(m, q)
            up_mat = theta[p + m * q :].reshape(mp, qp)
            s_u = u_mat.T @ u_mat
            s_up = up_mat.T @ up_mat

            if family_b:
                sigma2 = sample_inverse_chisq(
                    rng, priors.nu_sigma2 + n_total, 1.0 / a_sig + rss
                )
                a_sig = sample_inverse_chisq(
                    rng,
                    priors.nu_sigma2 + 1,
                    1.0 / sigma2 + 1.0 / (priors.nu_sigma2 * priors.s_sigma2**2),
                )
                Sigma = sample_inverse_wishart(
                    rng, priors.nu_Sigma + 2 * q - 2 + m, np.diag(1.0 / A_diag) + s_u
                )
                A_diag = sample_inverse_chisq(
                    rng,
                    priors.nu_Sigma + q,
                    np.diag(np.linalg.inv(Sigma)) + 1.0 / (priors.nu_Sigma * priors.s_Sigma**2),
                )
                Sigma_p = sample_inverse_wishart(
                    rng,
                    priors.nu_Sigma_prime + 2 * qp - 2 + mp,
                    np.diag(1.0 / A_diag_p) + s_up,
                )
                A_diag_p = sample_inverse_chisq(
                    rng,
                    priors.nu_Sigma_prime + qp,
                    np.diag(np.linalg.inv(Sigma_p))
                    + 1.0 / (priors.nu_Sigma_prime * priors.s_Sigma_prime**2),
                )
            else:
                sigma2 = sample_inverse_chisq(
                    rng, priors.xi_sigma2 + n_total, priors.lambda_sigma2 + rss
                )
                Sigma = sample_inverse_wishart(
                    rng, priors.xi_Sigma + m, priors.Lambda_Sigma + s_u
                )
                Sigma_p = sample_inverse_wishart(
                    rng, priors.xi_Sigma_prime + mp, priors.Lambda_Sigma_prime + s_up
                )
        except Exception as exc:
            raise type(exc)(f"{exc} (at Gibbs sweep {sweep + 1})") from exc

        keep = sweep - warmup
        if keep >= 0:
            out_beta[keep] = theta[:p]
            out_u[keep] = u_mat
            out_up[keep] = up_mat
            out_s2[keep] = sigma2
            out_S[keep] = Sigma
            out_Sp[keep] = Sigma_p
            if family_b:
                out_a[keep] = a_sig
                out_A[keep] = A_diag
                out_Ap[keep] = A_diag_p

    return GibbsDraws(
        beta=out_beta,
        u=out_u,
        uprime=out_up,
        sigma2=out_s2,
        Sigma=out_S,
        Sigma_prime=out_Sp,
        a_sigma2=out_a,
        A_Sigma=out_A,
        A_Sigma_prime=out_Ap,
        warmup=warmup,
        retained=retained,
        seed=seed,
    )


def integrated_autocorr_time(chain):
    """Integrated autocorrelation time by Geyer's initial positive sequence.

    Sums adjacent-pair autocovariances until the first non-positive pair;
    returns at least 1 (an iid chain).
    """
    chain = np.asarray(chain, dtype=float)
    n = chain.size
    x = chain - chain.mean()
    if n < 4 or np.allclose(x, 0.0):
        return 1.0
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0:
        return 1.0
    total = -acov[0]
    for j in range(0, n // 2 - 1):
        pair = acov[2 * j] + acov[2 * j + 1]
        if pair <= 0:
            break
        total += 2.0 * pair
    return max(total / acov[0], 1.0)


def mc_standard_error(chain):
    """Autocorrelation-adjusted Monte Carlo standard error of the chain mean."""
    chain = np.asarray(chain, dtype=float)
    tau = integrated_autocorr_time(chain)
    return float(np.std(chain) * np.sqrt(tau / chain.size))


def silverman_bandwidth(samples):
    """0.9 min(sd, IQR/1.34) n^{-1/5}; falls back to the sd when the IQR
    degenerates but the spread does not."""
    samples = np.asarray(samples, dtype=float)
    sd = float(np.std(samples))
    if sd == 0.0 or not np.all(np.isfinite(samples)):
        raise DegenerateSampleError("sample has zero variance or non-finite values")
    q75, q25 = np.percentile(samples, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) or sd
    return 0.9 * spread * samples.size ** (-0.2)


def kde_grid(samples, points=512, pad=4.0):
    """Equispaced grid spanning the sample range padded by ``pad`` bandwidths."""
    h = silverman_bandwidth(samples)
    lo = float(np.min(samples)) - pad * h
    hi = float(np.max(samples)) + pad * h
    return np.linspace(lo, hi, points)


def kde(samples, grid):
    """Gaussian-kernel density estimate on a grid.

    Requires at least 100 finite samples; bandwidth by Silverman's rule.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 100:
        raise DegenerateSampleError("need at least 100 samples for a density estimate")
    h = silverman_bandwidth(samples)
    grid = np.asarray(grid, dtype=float)
    out = np.zeros(grid.shape[0])
    chunk = max(1, int(2_000_000 // max(grid.shape[0], 1)))
    norm = 1.0 / (samples.size * h * np.sqrt(2 * np.pi))
    for start in range(0, samples.size, chunk):
        block = samples[start : start + chunk]
        z = (grid[:, None] - block[None, :]) / h
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out * norm


def accuracy(q_density, ref_density, grid):
    """Accuracy score 100 (1 - L1(q, ref) / 2) in percent, clamped to [0, 100].

    Both densities must be evaluated on the common ``grid``; the L1
    distance is a trapezoid integral.
    """
    q_density = np.asarray(q_density, dtype=float)
    ref_density = np.asarray(ref_density, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if q_density.shape != grid.shape or ref_density.shape != grid.shape:
        raise GridMismatchError("densities and grid have different lengths")
    l1 = float(np.trapezoid(np.abs(q_density - ref_density), grid))
    return float(np.clip(100.0 * (1.0 - 0.5 * l1), 0.0, 100.0))
