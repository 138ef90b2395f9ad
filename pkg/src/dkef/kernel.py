"""Deep kernel: a convex mixture of Gaussian kernels on learned features,

    k(x, y) = sum_r rho_r exp(-|phi_r(x) - phi_r(y)|^2 / (2 sigma_r^2)),

with first and second derivatives in the coordinates of the first argument.
"""

from dataclasses import dataclass

import numpy as np

from . import featnet
from .errors import ShapeMismatch

DEFAULT_SIGMAS = (1.0, 3.3, 10.0)


def default_sigmas(R):
    if R == len(DEFAULT_SIGMAS):
        return DEFAULT_SIGMAS
    if R == 1:
        return (1.0,)
    return tuple(np.geomspace(1.0, 10.0, R))


@dataclass(frozen=True)
class KernelParams:
    """Unconstrained storage: softmax logits for rho and log bandwidths."""

    logits: np.ndarray
    log_sigma: np.ndarray
    nets: tuple

    def __post_init__(self):
        R = len(self.nets)
        if R < 1 or self.logits.shape != (R,) or self.log_sigma.shape != (R,):
            raise ShapeMismatch("kernel parameter arrays must all have length R")
        dims = {net.spec.input_dim for net in self.nets}
        if len(dims) != 1:
            raise ShapeMismatch("all component networks must share an input dimension")

    @property
    def R(self):
        return len(self.nets)

    @property
    def input_dim(self):
        return self.nets[0].spec.input_dim

    @property
    def rho(self):
        e = np.exp(self.logits - np.max(self.logits))
        return e / e.sum()

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @classmethod
    def create(cls, nets, sigmas=None, rho=None):
        nets = tuple(nets)
        R = len(nets)
        sigmas = default_sigmas(R) if sigmas is None else sigmas
        logits = np.zeros(R) if rho is None else np.log(np.asarray(rho, dtype=np.float64))
        return cls(logits, np.log(np.asarray(sigmas, dtype=np.float64)), nets)


def init_kernel(spec, R, rng, sigmas=None):
    nets = [featnet.init_params(spec, rng) for _ in range(R)]
    return KernelParams.create(nets, sigmas)


def _check(kp, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != kp.input_dim:
        raise ShapeMismatch(f"expected (N, {kp.input_dim}) points, got {X.shape}")
    return X


class CrossCache:
    def __init__(self, comps, K, DK, HK):
        self.comps = comps
        self.K = K
        self.DK = DK
        self.HK = HK


def cross(kp, X, Z, keep=False):
    """Kernel values and first-argument derivatives for all pairs.

    Returns ``(K, DK, HK)`` of shapes (N, M), (N, M, D), (N, M, D) where
    ``DK[n, m, d] = d/dx_d k(x_n, z_m)`` and ``HK`` the second derivative.
    With ``keep`` a :class:`CrossCache` for :func:`cross_backward` is
    returned instead.
    """
    X = _check(kp, X)
    Z = _check(kp, Z)
    N, D = X.shape
    M = Z.shape[0]
    K = np.zeros((N, M))
    DK = np.zeros((N, M, D))
    HK = np.zeros((N, M, D))
    comps = []
    for rho, sigma, net in zip(kp.rho, kp.sigma, kp.nets):
        s = 1.0 / sigma ** 2
        if keep:
            tx = featnet.forward_full(net, X, keep=True)
            tz = featnet.forward_full(net, Z, keep=True)
            hx, Jx, Hx, hz = tx.h, tx.J, tx.H, tz.h
        else:
            hx, Jx, Hx = featnet.forward_full(net, X)
            hz = featnet.forward_values(net, Z)
        delta = hx[:, None, :] - hz[None, :, :]
        sq = np.einsum("nmf,nmf->nm", delta, delta)
        e = np.exp(-0.5 * s * sq)
        g = np.einsum("nmf,nfd->nmd", delta, Jx)
        P = np.einsum("nfd,nfd->nd", Jx, Jx)
        q = np.einsum("nmf,nfd->nmd", delta, Hx)
        e3 = e[:, :, None]
        dk = -s * e3 * g
        hk = e3 * (s * s * g * g - s * (P[:, None, :] + q))
        K += rho * e
        DK += rho * dk
        HK += rho * hk
        if keep:
            comps.append(dict(s=s, tx=tx, tz=tz, delta=delta, sq=sq, e=e, g=g, P=P, q=q, dk=dk, hk=hk))
    if keep:
        return CrossCache(comps, K, DK, HK)
    return K, DK, HK


def cross_backward(kp, cache, gK=None, gD=None, gH=None):
    """Push sensitivities on ``(K, DK, HK)`` back to kernel parameters.

    Returns ``(grads, gZ)``: ``grads`` is a dict with ``logits``,
    ``log_sigma`` and ``nets`` (one list per component aligned with
    ``NetParams.arrays()``); ``gZ`` is the gradient for the second
    argument points.
    """
    rho = kp.rho
    R = kp.R
    g_rho = np.zeros(R)
    g_logsig = np.zeros(R)
    net_grads = []
    gZ = None
    for r, (net, c) in enumerate(zip(kp.nets, cache.comps)):
        s, e, g, P, q, delta = c["s"], c["e"], c["g"], c["P"], c["q"], c["delta"]
        tx, tz = c["tx"], c["tz"]
        Jx, Hx = tx.J, tx.H
        N, M = e.shape
        # sensitivities on this component's k_r, dk_r, hk_r
        gk = np.zeros((N, M)) if gK is None else rho[r] * gK
        gd = None if gD is None else rho[r] * gD
        gh = None if gH is None else rho[r] * gH
        tot = 0.0
        if gK is not None:
            tot += np.sum(gK * e)
        if gD is not None:
            tot += np.sum(gD * c["dk"])
        if gH is not None:
            tot += np.sum(gH * c["hk"])
        g_rho[r] = tot

        e3 = e[:, :, None]
        ge = gk.copy()
        gg = np.zeros_like(g)
        gs = 0.0
        gP = None
        gq = None
        if gd is not None:
            ge += np.einsum("nmd,nmd->nm", gd, -s * g)
            gg += gd * (-s * e3)
            gs += np.sum(gd * (-e3 * g))
        if gh is not None:
            Pq = P[:, None, :] + q
            ge += np.einsum("nmd,nmd->nm", gh, s * s * g * g - s * Pq)
            gg += gh * (2.0 * s * s * e3 * g)
            ghe = gh * (-s * e3)
            gP = ghe.sum(axis=1)
            gq = ghe
            gs += np.sum(gh * e3 * (2.0 * s * g * g - Pq))
        gs += np.sum(ge * (-0.5 * e * c["sq"]))
        g_logsig[r] = -2.0 * s * gs

        g_delta = (ge * (-s * e))[:, :, None] * delta
        g_delta += np.einsum("nmd,nfd->nmf", gg, Jx)
        gJ = np.einsum("nmd,nmf->nfd", gg, delta)
        gHx = None
        if gq is not None:
            g_delta += np.einsum("nmd,nfd->nmf", gq, Hx)
            gHx = np.einsum("nmd,nmf->nfd", gq, delta)
        if gP is not None:
            gJ += 2.0 * gP[:, None, :] * Jx
        g_hx = g_delta.sum(axis=1)
        g_hz = -g_delta.sum(axis=0)
        px, _ = featnet.backward(net, tx, g_hx, gJ, gHx)
        pz, gz = featnet.backward(net, tz, g_hz)
        net_grads.append([a + b for a, b in zip(px, pz)])
        gZ = gz if gZ is None else gZ + gz
    g_logits = rho * (g_rho - np.dot(rho, g_rho))
    return {"logits": g_logits, "log_sigma": g_logsig, "nets": net_grads}, gZ


class GramCache:
    def __init__(self, comps, K):
        self.comps = comps
        self.K = K


def gram(kp, Z, keep=False):
    """Symmetric Gram matrix k(z_m, z_m')."""
    Z = _check(kp, Z)
    M = Z.shape[0]
    K = np.zeros((M, M))
    comps = []
    for rho, sigma, net in zip(kp.rho, kp.sigma, kp.nets):
        s = 1.0 / sigma ** 2
        if keep:
            t = featnet.forward_full(net, Z, keep=True)
            h = t.h
        else:
            h = featnet.forward_values(net, Z)
        delta = h[:, None, :] - h[None, :, :]
        sq = np.einsum("nmf,nmf->nm", delta, delta)
        e = np.exp(-0.5 * s * sq)
        K += rho * e
        if keep:
            comps.append(dict(s=s, t=t, delta=delta, sq=sq, e=e))
    if keep:
        return GramCache(comps, K)
    return K


def gram_backward(kp, cache, gK):
    rho = kp.rho
    g_rho = np.zeros(kp.R)
    g_logsig = np.zeros(kp.R)
    net_grads = []
    gZ = None
    for r, (net, c) in enumerate(zip(kp.nets, cache.comps)):
        s, e, delta = c["s"], c["e"], c["delta"]
        g_rho[r] = np.sum(gK * e)
        ge = rho[r] * gK
        g_logsig[r] = -2.0 * s * np.sum(ge * (-0.5 * e * c["sq"]))
        gd = (ge * (-s * e))[:, :, None] * delta
        g_h = gd.sum(axis=1) - gd.sum(axis=0)
        p, gz = featnet.backward(net, c["t"], g_h)
        net_grads.append(p)
        gZ = gz if gZ is None else gZ + gz
    g_logits = rho * (g_rho - np.dot(rho, g_rho))
    return {"logits": g_logits, "log_sigma": g_logsig, "nets": net_grads}, gZ


def values(kp, X, Z, chunk=None):
    """Kernel matrix k(x_n, z_m) without derivatives, computed in row chunks."""
    X = _check(kp, X)
    Z = _check(kp, Z)
    N, M = X.shape[0], Z.shape[0]
    out = np.zeros((N, M))
    feats_z = [featnet.forward_values(net, Z) for net in kp.nets]
    if chunk is None:
        width = max(net.spec.out_dim for net in kp.nets)
        chunk = max(1, 2 ** 21 // max(1, M * width))
    for start in range(0, N, chunk):
        Xc = X[start:start + chunk]
        acc = np.zeros((Xc.shape[0], M))
        for rho, sigma, net, hz in zip(kp.rho, kp.sigma, kp.nets, feats_z):
            hx = featnet.forward_values(net, Xc)
            delta = hx[:, None, :] - hz[None, :, :]
            sq = np.einsum("nmf,nmf->nm", delta, delta)
            acc += rho * np.exp(-0.5 * sq / sigma ** 2)
        out[start:start + chunk] = acc
    return out


def _pair(kp, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (kp.input_dim,) or y.shape != (kp.input_dim,):
        raise ShapeMismatch(f"expected points of dimension {kp.input_dim}")
    return x[None], y[None]


def eval(kp, x, y):
    X, Y = _pair(kp, x, y)
    return float(values(kp, X, Y)[0, 0])


def grad_x(kp, x, y):
    X, Y = _pair(kp, x, y)
    return cross(kp, X, Y)[1][0, 0]


def hess_diag_x(kp, x, y):
    X, Y = _pair(kp, x, y)
    return cross(kp, X, Y)[2][0, 0]
