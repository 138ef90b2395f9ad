"""Axis-aligned generalized-normal base density

    q0(x) = prod_d exp(-|x_d - mu_d|^beta_d / (2 sigma_d^2)),   beta_d > 1.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import ShapeMismatch

EPS = 1e-6


def _softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(y > 30, y + np.log1p(-np.exp(-y)), np.log(np.expm1(y)))


@dataclass(frozen=True)
class BaseDensityParams:
    """Unconstrained storage: ``log_sigma`` and ``beta_raw`` with
    ``beta = 1 + softplus(beta_raw)``."""

    mu: np.ndarray
    log_sigma: np.ndarray
    beta_raw: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        D = self.mu.shape
        if len(D) != 1 or self.log_sigma.shape != D or self.beta_raw.shape != D:
            raise ShapeMismatch("mu, log_sigma, beta_raw must be 1-d of equal length")

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def beta(self):
        return 1.0 + _softplus(self.beta_raw)

    @classmethod
    def from_values(cls, mu, sigma, beta, trainable=False):
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        D = mu.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (D,))
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (D,))
        return cls(mu.copy(), np.log(sigma).copy(), _softplus_inv(beta - 1.0), trainable)

    @classmethod
    def default(cls, D, trainable=False):
        """Isotropic normal with standard deviation 2."""
        return cls.from_values(np.zeros(D), 2.0, 2.0, trainable)


def _points(bp, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != bp.dim:
        raise ShapeMismatch(f"expected dimension {bp.dim}, got {x.shape}")
    return X, single


def log_q0_unnorm(bp, x):
    X, single = _points(bp, x)
    a = np.abs(X - bp.mu)
    out = -np.sum(a ** bp.beta / (2.0 * bp.sigma ** 2), axis=1)
    return out[0] if single else out


def _derivs(bp, X):
    u = X - bp.mu
    a = np.abs(u)
    beta = bp.beta
    c = 1.0 / (2.0 * bp.sigma ** 2)
    g1 = -beta * c * np.sign(u) * a ** (beta - 1.0)
    a2 = np.where(beta < 2.0, np.maximum(a, EPS), a)
    g2 = -beta * (beta - 1.0) * c * a2 ** (beta - 2.0)
    return u, a, a2, beta, c, g1, g2


def grad_log_q0(bp, x):
    X, single = _points(bp, x)
    g1 = _derivs(bp, X)[5]
    return g1[0] if single else g1


def hess_diag_log_q0(bp, x):
    X, single = _points(bp, x)
    g2 = _derivs(bp, X)[6]
    return g2[0] if single else g2


def derivs(bp, X):
    """``(d log q0, d^2 log q0)``, each (N, D)."""
    X, _ = _points(bp, X)
    out = _derivs(bp, X)
    return out[5], out[6]


def derivs_backward(bp, X, g_g1, g_g2):
    """Gradients of <g1, g_g1> + <g2, g_g2> with respect to the stored
    parameters ``(mu, log_sigma, beta_raw)``."""
    X, _ = _points(bp, X)
    u, a, a2, beta, c, g1, g2 = _derivs(bp, X)
    sgn = np.sign(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        loga = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), 0.0)
        loga2 = np.log(a2)
        p1 = a ** (beta - 1.0)
        p2 = a2 ** (beta - 2.0)
        p3 = np.where(a2 > 0, a2 ** (beta - 3.0), 0.0)
    clamped = (beta < 2.0) & (a < EPS)
    # d g1 / d mu = -d g1 / d u
    dg1_dmu = beta * (beta - 1.0) * c * p2
    dg2_dmu = np.where(clamped, 0.0, beta * (beta - 1.0) * (beta - 2.0) * c * p3 * sgn)
    dg1_dbeta = -c * sgn * p1 * (1.0 + beta * loga)
    dg2_dbeta = -c * p2 * ((2.0 * beta - 1.0) + beta * (beta - 1.0) * loga2)
    g_mu = np.sum(g_g1 * dg1_dmu + g_g2 * dg2_dmu, axis=0)
    g_logsig = np.sum(-2.0 * (g_g1 * g1 + g_g2 * g2), axis=0)
    g_beta = np.sum(g_g1 * dg1_dbeta + g_g2 * dg2_dbeta, axis=0)
    # beta = 1 + softplus(raw)
    sig = 1.0 / (1.0 + np.exp(-bp.beta_raw))
    return {"mu": g_mu, "log_sigma": g_logsig, "beta_raw": g_beta * sig}


def log_partition(bp):
    """log of the integral of exp(log_q0_unnorm) over R^D."""
    beta = bp.beta
    # per dim: (2/beta) Gamma(1/beta) (2 sigma^2)^(1/beta)
    per = np.log(2.0) - np.log(beta) + gammaln(1.0 / beta) + np.log(2.0 * bp.sigma ** 2) / beta
    return float(np.sum(per))


def sample(bp, n, seed):
    """``n`` draws from the normalized base density."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n < 1:
        raise ValueError("n must be >= 1")
    beta = bp.beta
    g = rng.standard_gamma(1.0 / beta, size=(n, bp.dim))
    sign = np.where(rng.random((n, bp.dim)) < 0.5, -1.0, 1.0)
    return bp.mu + sign * (2.0 * bp.sigma ** 2 * g) ** (1.0 / beta)


def check_normalizable(bp, kp=None):
    """True iff every shape exponent exceeds 1; the deep kernel is bounded
    by construction so that is all the normalizer needs."""
    beta = bp.beta
    return bool(np.all(np.isfinite(beta)) and np.all(beta > 1.0))
