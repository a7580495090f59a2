"""Prior families for the crossed random effects model.

Family A places Inverse-Wishart (Inverse-G-Wishart with a full graph)
priors straight on the covariance matrices and an Inverse-chi-squared
prior on the error variance.  Family B is the hierarchical construction
of Huang & Wand (2013): each covariance matrix gets an Inverse-G-Wishart
prior conditioned on a diagonal auxiliary matrix, which makes the implied
standard deviation and correlation priors arbitrarily non-informative.
"""

from dataclasses import dataclass, field

import numpy as np

from ._linalg import chol_lower, symmetrize
from .errors import ShapeMismatchError

__all__ = ["IGWParams", "PriorSpec"]


def _as_spd(mat, name):
    mat = symmetrize(np.atleast_2d(np.asarray(mat, dtype=float)))
    chol_lower(mat, name)  # raises NotPositiveDefiniteError
    return mat


def _as_positive(x, name):
    x = float(x)
    if not x > 0:
        raise ValueError(f"{name} must be positive, got {x}")
    return x


def _as_positive_vector(v, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not np.all(v > 0):
        raise ValueError(f"every entry of {name} must be positive")
    return v


@dataclass(frozen=True)
class IGWParams:
    """Inverse-G-Wishart parameters (shape/scale convention).

    The density is proportional to |X|^{-(shape+2)/2} exp{-tr(scale X^{-1})/2}
    over SPD matrices X whose inverse respects the graph.  With graph
    ``full`` this is the ordinary Inverse-Wishart; with graph ``diag`` it is
    a product of independent Inverse-chi-squared variables (the scalar case
    is Inverse-chi-squared(shape, scale)).
    """

    graph: str
    shape: float
    scale: np.ndarray

    def __post_init__(self):
        if self.graph not in ("full", "diag"):
            raise ValueError(f"graph must be 'full' or 'diag', got {self.graph!r}")
        object.__setattr__(self, "shape", _as_positive(self.shape, "shape"))
        object.__setattr__(self, "scale", _as_spd(self.scale, "scale"))
        if self.graph == "diag" and not np.allclose(
            self.scale, np.diag(np.diag(self.scale))
        ):
            raise ShapeMismatchError("a diag-graph scale matrix must be diagonal")

    @property
    def dim(self):
        return self.scale.shape[0]

    def mean_inverse(self):
        """E[X^{-1}] under this distribution.

        Full graph: (shape - dim + 1) scale^{-1}; diag graph: shape scale^{-1}.
        """
        if self.graph == "full":
            factor = self.shape - self.dim + 1
            if factor <= 0:
                raise ValueError("shape too small for the inverse moment to exist")
            return factor * np.linalg.inv(self.scale)
        return self.shape * np.diag(1.0 / np.diag(self.scale))


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters for one of the two supported prior families.

    Use the ``family_a`` / ``family_b`` constructors; they validate the
    positivity and definiteness constraints up front.
    """

    family: str
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    # family A
    xi_sigma2: float | None = None
    lambda_sigma2: float | None = None
    xi_Sigma: float | None = None
    Lambda_Sigma: np.ndarray | None = None
    xi_Sigma_prime: float | None = None
    Lambda_Sigma_prime: np.ndarray | None = None
    # family B
    nu_sigma2: float | None = None
    s_sigma2: float | None = None
    nu_Sigma: float | None = None
    s_Sigma: np.ndarray | None = None
    nu_Sigma_prime: float | None = None
    s_Sigma_prime: np.ndarray | None = None

    @property
    def p(self):
        return self.mu_beta.shape[0]

    @property
    def q(self):
        if self.family == "A":
            return self.Lambda_Sigma.shape[0]
        return self.s_Sigma.shape[0]

    @property
    def qprime(self):
        if self.family == "A":
            return self.Lambda_Sigma_prime.shape[0]
        return self.s_Sigma_prime.shape[0]

    @staticmethod
    def family_a(
        mu_beta,
        Sigma_beta,
        xi_sigma2,
        lambda_sigma2,
        xi_Sigma,
        Lambda_Sigma,
        xi_Sigma_prime,
        Lambda_Sigma_prime,
    ):
        mu_beta = np.atleast_1d(np.asarray(mu_beta, dtype=float))
        Sigma_beta = _as_spd(Sigma_beta, "Sigma_beta")
        if Sigma_beta.shape[0] != mu_beta.shape[0]:
            raise ShapeMismatchError("mu_beta and Sigma_beta dimensions differ")
        Lambda_Sigma = _as_spd(Lambda_Sigma, "Lambda_Sigma")
        Lambda_Sigma_prime = _as_spd(Lambda_Sigma_prime, "Lambda_Sigma_prime")
        xi_Sigma = float(xi_Sigma)
        xi_Sigma_prime = float(xi_Sigma_prime)
        q = Lambda_Sigma.shape[0]
        qp = Lambda_Sigma_prime.shape[0]
        if not xi_Sigma > 2 * (q - 1):
            raise ValueError(f"xi_Sigma must exceed 2(q-1) = {2 * (q - 1)}")
        if not xi_Sigma_prime > 2 * (qp - 1):
            raise ValueError(f"xi_Sigma_prime must exceed 2(q'-1) = {2 * (qp - 1)}")
        return PriorSpec(
            family="A",
            mu_beta=mu_beta,
            Sigma_beta=Sigma_beta,
            xi_sigma2=_as_positive(xi_sigma2, "xi_sigma2"),
            lambda_sigma2=_as_positive(lambda_sigma2, "lambda_sigma2"),
            xi_Sigma=xi_Sigma,
            Lambda_Sigma=Lambda_Sigma,
            xi_Sigma_prime=xi_Sigma_prime,
            Lambda_Sigma_prime=Lambda_Sigma_prime,
        )

    @staticmethod
    def family_b(
        mu_beta,
        Sigma_beta,
        nu_sigma2,
        s_sigma2,
        nu_Sigma,
        s_Sigma,
        nu_Sigma_prime,
        s_Sigma_prime,
    ):
        mu_beta = np.atleast_1d(np.asarray(mu_beta, dtype=float))
        Sigma_beta = _as_spd(Sigma_beta, "Sigma_beta")
        if Sigma_beta.shape[0] != mu_beta.shape[0]:
            raise ShapeMismatchError("mu_beta and Sigma_beta dimensions differ")
        return PriorSpec(
            family="B",
            mu_beta=mu_beta,
            Sigma_beta=Sigma_beta,
            nu_sigma2=_as_positive(nu_sigma2, "nu_sigma2"),
            s_sigma2=_as_positive(s_sigma2, "s_sigma2"),
            nu_Sigma=_as_positive(nu_Sigma, "nu_Sigma"),
            s_Sigma=_as_positive_vector(s_Sigma, "s_Sigma"),
            nu_Sigma_prime=_as_positive(nu_Sigma_prime, "nu_Sigma_prime"),
            s_Sigma_prime=_as_positive_vector(s_Sigma_prime, "s_Sigma_prime"),
        )

    def check_dims(self, p, q, qprime):
        if self.p != p or self.q != q or self.qprime != qprime:
            raise ShapeMismatchError(
                f"prior dims (p={self.p}, q={self.q}, q'={self.qprime}) do not "
                f"match data dims (p={p}, q={q}, q'={qprime})"
            )


def default_prior_b(p, q, qprime, scale=1e5, sigma_beta=1e10):
    """Weakly informative family-B prior used by the simulation studies."""
    return PriorSpec.family_b(
        mu_beta=np.zeros(p),
        Sigma_beta=sigma_beta * np.eye(p),
        nu_sigma2=1.0,
        s_sigma2=scale,
        nu_Sigma=2.0,
        s_Sigma=np.full(q, scale),
        nu_Sigma_prime=2.0,
        s_Sigma_prime=np.full(qprime, scale),
    )
