"""Lite kernel exponential family: log p~(x) = sum_m alpha_m k(x, z_m) + log q0(x).

Holds the fitted-model type, assembly of the score-matching matrices, the
closed-form coefficient solve and the empirical score objective.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import basedist, kernel
from .errors import EmptyBatch, ShapeMismatch
from .linalg import spd_solve

ASSEMBLE_CHUNK = 128


@dataclass(frozen=True)
class RegWeights:
    lam_alpha: float = 1e-3
    lam_c: float = 1e-3
    lam_h: float = 0.0

    def __post_init__(self):
        if not self.lam_alpha > 0:
            raise ValueError("lam_alpha must be strictly positive")
        if self.lam_c < 0 or self.lam_h < 0:
            raise ValueError("lam_c and lam_h must be nonnegative")


@dataclass(frozen=True)
class ScoreMatrices:
    """Batch averages defining the quadratic objective in alpha.

    ``b = b0 + lam_c * bC``; kept split so lam_c can change without
    re-assembling.
    """

    G: np.ndarray
    U: np.ndarray
    K: np.ndarray
    b0: np.ndarray
    bC: np.ndarray
    n: int = 0

    def b(self, lam_c):
        return self.b0 + lam_c * self.bC

    def system(self, reg):
        M = self.G.shape[0]
        A = self.G + reg.lam_alpha * np.eye(M) + reg.lam_c * self.U
        if reg.lam_h:
            A = A + reg.lam_h * self.K
        return A, self.b(reg.lam_c)


@dataclass(frozen=True)
class FittedModel:
    kernel: kernel.KernelParams
    base: basedist.BaseDensityParams
    z: np.ndarray
    alpha: np.ndarray
    whitening: object = field(default=None)

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] < 1 or self.alpha.shape != (self.z.shape[0],):
            raise ShapeMismatch("need z of shape (M, D) and alpha of shape (M,)")
        if self.z.shape[1] != self.kernel.input_dim or self.base.dim != self.kernel.input_dim:
            raise ShapeMismatch("kernel, base density and inducing points disagree on dimension")

    @property
    def dim(self):
        return self.z.shape[1]

    @property
    def M(self):
        return self.z.shape[0]

    @property
    def log_abs_det(self):
        return 0.0 if self.whitening is None else float(self.whitening.log_abs_det)

    def to_internal(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x if self.whitening is None else self.whitening.apply(x)

    def f(self, u):
        """Kernel part of the log density at internal-coordinate points."""
        U = np.atleast_2d(np.asarray(u, dtype=np.float64))
        return kernel.values(self.kernel, U, self.z) @ self.alpha

    def log_density(self, x):
        """Unnormalized log density at data-space points (no Jacobian term)."""
        return log_p_tilde(self, self.to_internal(x))

    def score(self, x):
        """Gradient of the log density with respect to data-space points."""
        g = grad_log_p_tilde(self, self.to_internal(x))
        return g if self.whitening is None else g @ self.whitening.transform

    def with_alpha(self, alpha):
        return FittedModel(self.kernel, self.base, self.z, np.asarray(alpha, dtype=np.float64), self.whitening)


def _batch(model_dim, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model_dim:
        raise ShapeMismatch(f"expected points of dimension {model_dim}, got {x.shape}")
    return X, single


def _chunks(N, size):
    return [(s, min(N, s + size)) for s in range(0, N, size)]


def _score_terms(model, X, chunk=ASSEMBLE_CHUNK):
    """First and second log-density derivatives, each (N, D)."""
    N, D = X.shape
    s1 = np.empty((N, D))
    s2 = np.empty((N, D))
    for a, b in _chunks(N, chunk):
        _, DK, HK = kernel.cross(model.kernel, X[a:b], model.z)
        g1, g2 = basedist.derivs(model.base, X[a:b])
        s1[a:b] = np.einsum("nmd,m->nd", DK, model.alpha) + g1
        s2[a:b] = np.einsum("nmd,m->nd", HK, model.alpha) + g2
    return s1, s2


def log_p_tilde(model, x):
    X, single = _batch(model.dim, x)
    out = model.f(X) + basedist.log_q0_unnorm(model.base, X)
    return float(out[0]) if single else out


def grad_log_p_tilde(model, x):
    X, single = _batch(model.dim, x)
    s1, _ = _score_terms(model, X)
    return s1[0] if single else s1


def hess_diag_log_p_tilde(model, x):
    X, single = _batch(model.dim, x)
    _, s2 = _score_terms(model, X)
    return s2[0] if single else s2


def _assemble_chunk(kp, bp, z, Xc):
    _, DK, HK = kernel.cross(kp, Xc, z)
    g1, g2 = basedist.derivs(bp, Xc)
    n, M, D = DK.shape
    A = DK.transpose(0, 2, 1).reshape(n * D, M)
    B = HK.transpose(0, 2, 1).reshape(n * D, M)
    return (
        A.T @ A,
        B.T @ B,
        HK.sum(axis=(0, 2)) + np.einsum("nd,nmd->m", g1, DK),
        np.einsum("nd,nmd->m", g2, HK),
    )


def assemble(kp, bp, z, data, threads=1, chunk=ASSEMBLE_CHUNK):
    """Build G, U, K, b0, bC from a data batch.

    Points are processed in fixed chunks; per-chunk partial sums are merged
    in chunk order, so the result does not depend on ``threads``.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBatch("cannot assemble score matrices from an empty batch")
    if X.shape[1] != kp.input_dim:
        raise ShapeMismatch("data dimension does not match kernel")
    N = X.shape[0]
    spans = _chunks(N, chunk)
    work = lambda ab: _assemble_chunk(kp, bp, z, X[ab[0]:ab[1]])
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(ab) for ab in spans]
    G, U, b0, bC = parts[0]
    for p in parts[1:]:
        G = G + p[0]
        U = U + p[1]
        b0 = b0 + p[2]
        bC = bC + p[3]
    K = kernel.gram(kp, z)
    G, U = G / N, U / N
    return ScoreMatrices(0.5 * (G + G.T), 0.5 * (U + U.T), K, b0 / N, bC / N, N)


def solve_alpha(sm, reg):
    """Minimizer of the regularized objective: -(G + la I + lh K + lc U)^-1 b."""
    A, b = sm.system(reg)
    return -spd_solve(A, b)


def quadratic_objective(sm, reg, alpha):
    """The alpha-dependent part: 0.5 a'Aa + a'b."""
    A, b = sm.system(reg)
    return 0.5 * alpha @ A @ alpha + alpha @ b


def quadratic_gradient(sm, reg, alpha):
    A, b = sm.system(reg)
    return A @ alpha + b


def _data(model, batch):
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBatch("batch is empty")
    if X.shape[1] != model.dim:
        raise ShapeMismatch("batch dimension does not match model")
    return X


def score_loss(model, batch):
    """Empirical score-matching objective on internal-coordinate points."""
    X = _data(model, batch)
    s1, s2 = _score_terms(model, X)
    return float(np.mean(np.sum(s2 + 0.5 * s1 ** 2, axis=1)))


def regularized_loss(model, batch, reg):
    X = _data(model, batch)
    s1, s2 = _score_terms(model, X)
    loss = np.mean(np.sum(s2 + 0.5 * s1 ** 2, axis=1))
    a = model.alpha
    loss += 0.5 * reg.lam_alpha * a @ a
    if reg.lam_h:
        loss += 0.5 * reg.lam_h * a @ kernel.gram(model.kernel, model.z) @ a
    loss += 0.5 * reg.lam_c * np.mean(np.sum(s2 ** 2, axis=1))
    return float(loss)


def fit_alpha(kp, bp, z, data, reg, whitening=None, threads=1):
    """Assemble on ``data`` and return the closed-form fitted model."""
    sm = assemble(kp, bp, z, data, threads=threads)
    return FittedModel(kp, bp, np.asarray(z, dtype=np.float64), solve_alpha(sm, reg), whitening)
