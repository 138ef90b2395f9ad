"""Three-stage fitting of a deep kernel exponential family.

Stage 1 meta-learns the kernel networks, bandwidths, mixture weights,
inducing points, regularization weights (and optionally the base density)
by differentiating the held-out score objective through the closed-form
coefficient fit. Stage 2 tunes only the regularization weights for a fit on
all training rows, and stage 3 computes the final coefficients.
"""

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from . import basedist, featnet, kernel
from .errors import DatasetTooSmall, DivergedLoss, EmptyCluster, NonNumeric, NumericalError
from .kef import FittedModel, RegWeights, ScoreMatrices, _score_terms, assemble, solve_alpha
from .linalg import cho_factor_jitter
from .preprocess import fit_whitening

import scipy.linalg

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Architecture:
    net: featnet.NetSpec
    R: int = 1
    sigmas: tuple | None = None


@dataclass(frozen=True)
class TrainConfig:
    n_inducing: int = 300
    batch_train: int = 100
    batch_val: int = 100
    lr_stage1: float = 1e-2
    lr_stage2: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 200
    data_noise_std: float = 0.05
    seed: int = 0
    max_wallclock: float | None = None
    max_steps_stage1: int = 5000
    max_steps_stage2: int = 1000
    eval_every: int = 10
    validation_fraction: float = 0.1
    max_validation: int = 1000
    init_lambda: float = 1e-3
    train_base: bool = True
    train_lambda_h: bool = False
    threads: int = 1

    def __post_init__(self):
        if min(self.n_inducing, self.batch_train, self.batch_val, self.patience, self.eval_every) < 1:
            raise ValueError("sizes, patience and eval_every must be >= 1")
        if self.data_noise_std < 0:
            raise ValueError("data_noise_std must be nonnegative")


@dataclass
class TrainReport:
    trace: list = field(default_factory=list)  # (step, stage, kind, objective, wallclock_ms)
    stage_boundaries: list = field(default_factory=list)
    final_validation: float = float("nan")
    wallclock: float = 0.0
    train_index: np.ndarray | None = None
    validation_index: np.ndarray | None = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "validation_objective", "wallclock_ms", "kind"])
            for step, stage, kind, value, ms in self.trace:
                w.writerow([step, stage, repr(float(value)), f"{ms:.1f}", kind])


class Params:
    """Flat name -> array store of everything the optimizer may move."""

    def __init__(self, arrays, arch, base_trainable, lam_h_fixed):
        self.arrays = arrays
        self.arch = arch
        self.base_trainable = base_trainable
        self.lam_h_fixed = lam_h_fixed

    @classmethod
    def from_parts(cls, kp, bp, z, reg, arch, train_lambda_h):
        a = {"logits": kp.logits.copy(), "log_sigma": kp.log_sigma.copy(), "z": np.array(z, dtype=np.float64)}
        for r, net in enumerate(kp.nets):
            for i, arr in enumerate(net.arrays()):
                a[f"net{r}.{i}"] = arr.copy()
        a["log_lam_alpha"] = np.array(np.log(reg.lam_alpha))
        a["log_lam_c"] = np.array(np.log(reg.lam_c))
        lam_h_fixed = None
        if train_lambda_h:
            a["log_lam_h"] = np.array(np.log(reg.lam_h))
        else:
            lam_h_fixed = reg.lam_h
        if bp.trainable:
            a["base.mu"] = bp.mu.copy()
            a["base.log_sigma"] = bp.log_sigma.copy()
            a["base.beta_raw"] = bp.beta_raw.copy()
            p = cls(a, arch, True, lam_h_fixed)
        else:
            p = cls(a, arch, False, lam_h_fixed)
            p._base = bp
        return p

    def copy(self):
        p = Params({k: v.copy() for k, v in self.arrays.items()}, self.arch, self.base_trainable, self.lam_h_fixed)
        if not self.base_trainable:
            p._base = self._base
        return p

    def kernel(self):
        a = self.arrays
        n_arr = len(featnet.zero_params(self.arch.net).arrays())
        nets = []
        for r in range(self.arch.R):
            nets.append(featnet.NetParams.from_arrays(self.arch.net, [a[f"net{r}.{i}"] for i in range(n_arr)]))
        return kernel.KernelParams(a["logits"], a["log_sigma"], tuple(nets))

    def base(self):
        if not self.base_trainable:
            return self._base
        a = self.arrays
        return basedist.BaseDensityParams(a["base.mu"], a["base.log_sigma"], a["base.beta_raw"], True)

    def reg(self):
        a = self.arrays
        lam_h = self.lam_h_fixed if "log_lam_h" not in a else float(np.exp(a["log_lam_h"]))
        return RegWeights(float(np.exp(a["log_lam_alpha"])), float(np.exp(a["log_lam_c"])), lam_h)

    @property
    def z(self):
        return self.arrays["z"]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            arrays[k] = arrays[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _system(G, U, K, b0, bC, reg):
    M = G.shape[0]
    A = G + reg.lam_alpha * np.eye(M) + reg.lam_c * U
    if reg.lam_h:
        A = A + reg.lam_h * K
    return A, b0 + reg.lam_c * bC


def _val_objective(alpha, DKv, HKv, g1v, g2v):
    s1 = np.einsum("nmd,m->nd", DKv, alpha) + g1v
    s2 = np.einsum("nmd,m->nd", HKv, alpha) + g2v
    J = float(np.mean(np.sum(s2 + 0.5 * s1 ** 2, axis=1)))
    Nv = DKv.shape[0]
    dJ_dalpha = (HKv.sum(axis=(0, 2)) + np.einsum("nd,nmd->m", s1, DKv)) / Nv
    return J, s1, dJ_dalpha


def meta_gradient(params, Xt, Xv):
    """Held-out score objective of the closed-form fit and its gradient.

    ``alpha`` is fit on ``Xt``; the objective is evaluated on ``Xv``. The
    gradient flows through the linear solve by the adjoint identity
    d(A^-1 b) = -A^-1 (dA A^-1 b - db), reusing the Cholesky factor.
    Returns ``(J, grads)`` with ``grads`` keyed like ``params.arrays``.
    """
    kp, bp, reg = params.kernel(), params.base(), params.reg()
    z = params.z
    N, D = Xt.shape
    Nv = Xv.shape[0]
    M = z.shape[0]
    need_K = bool(reg.lam_h) or "log_lam_h" in params.arrays

    ct = kernel.cross(kp, Xt, z, keep=True)
    DKt, HKt = ct.DK, ct.HK
    g1t, g2t = basedist.derivs(bp, Xt)
    At = DKt.transpose(0, 2, 1).reshape(N * D, M)
    Bt = HKt.transpose(0, 2, 1).reshape(N * D, M)
    G = At.T @ At / N
    U = Bt.T @ Bt / N
    b0 = (HKt.sum(axis=(0, 2)) + np.einsum("nd,nmd->m", g1t, DKt)) / N
    bC = np.einsum("nd,nmd->m", g2t, HKt) / N
    gc = kernel.gram(kp, z, keep=True) if need_K else None
    K = gc.K if need_K else None

    A, b = _system(G, U, K, b0, bC, reg)
    factor, _ = cho_factor_jitter(0.5 * (A + A.T))
    alpha = -scipy.linalg.cho_solve(factor, b, check_finite=False)

    cv = kernel.cross(kp, Xv, z, keep=True)
    g1v, g2v = basedist.derivs(bp, Xv)
    J, s1, c = _val_objective(alpha, cv.DK, cv.HK, g1v, g2v)
    v = scipy.linalg.cho_solve(factor, c, check_finite=False)

    # dJ = -v' (dA alpha + db)
    gA = -np.outer(v, alpha)
    gb = -v
    S = gA + gA.T
    lam_c = reg.lam_c
    grads = {}
    grads["log_lam_alpha"] = np.array(reg.lam_alpha * np.trace(gA))
    grads["log_lam_c"] = np.array(lam_c * (np.sum(gA * U) + gb @ bC))
    if "log_lam_h" in params.arrays:
        grads["log_lam_h"] = np.array(reg.lam_h * np.sum(gA * K))

    # training-side sensitivities on DK, HK and the base-density terms
    gDKt = np.einsum("mk,nkd->nmd", S, DKt) / N + gb[None, :, None] * g1t[:, None, :] / N
    gHKt = lam_c * np.einsum("mk,nkd->nmd", S, HKt) / N + gb[None, :, None] / N \
        + lam_c * gb[None, :, None] * g2t[:, None, :] / N
    gg1t = np.einsum("m,nmd->nd", gb, DKt) / N
    gg2t = lam_c * np.einsum("m,nmd->nd", gb, HKt) / N

    # validation-side sensitivities
    gDKv = s1[:, None, :] * alpha[None, :, None] / Nv
    gHKv = np.broadcast_to(alpha[None, :, None] / Nv, cv.HK.shape)
    gg1v = s1 / Nv
    gg2v = np.full_like(g2v, 1.0 / Nv)

    kg_t, gz_t = kernel.cross_backward(kp, ct, None, gDKt, gHKt)
    kg_v, gz_v = kernel.cross_backward(kp, cv, None, gDKv, gHKv)
    parts = [kg_t, kg_v]
    gz = gz_t + gz_v
    if need_K and reg.lam_h:
        kg_k, gz_k = kernel.gram_backward(kp, gc, reg.lam_h * gA)
        parts.append(kg_k)
        gz = gz + gz_k
    grads["logits"] = sum(p["logits"] for p in parts)
    grads["log_sigma"] = sum(p["log_sigma"] for p in parts)
    for r in range(kp.R):
        for i in range(len(parts[0]["nets"][r])):
            grads[f"net{r}.{i}"] = sum(p["nets"][r][i] for p in parts)
    grads["z"] = gz
    if params.base_trainable:
        bt = basedist.derivs_backward(bp, Xt, gg1t, gg2t)
        bv = basedist.derivs_backward(bp, Xv, gg1v, gg2v)
        for k in ("mu", "log_sigma", "beta_raw"):
            grads[f"base.{k}"] = bt[k] + bv[k]
    return J, grads


def heldout_objective(params, X1, X2, threads=1):
    """Score objective on ``X2`` of the coefficients fit on all of ``X1``."""
    kp, bp, reg = params.kernel(), params.base(), params.reg()
    sm = assemble(kp, bp, params.z, X1, threads=threads)
    alpha = solve_alpha(sm, reg)
    model = FittedModel(kp, bp, params.z, alpha)
    s1, s2 = _score_terms(model, X2)
    return float(np.mean(np.sum(s2 + 0.5 * s1 ** 2, axis=1)))


def _lambda_step(sm, reg, val_terms, idx, train_lambda_h):
    """Objective on a validation subset and gradients in the log lambdas,
    with score matrices held fixed."""
    DKv, HKv, g1v, g2v = (t[idx] for t in val_terms)
    A, b = _system(sm.G, sm.U, sm.K, sm.b0, sm.bC, reg)
    factor, _ = cho_factor_jitter(0.5 * (A + A.T))
    alpha = -scipy.linalg.cho_solve(factor, b, check_finite=False)
    J, _, c = _val_objective(alpha, DKv, HKv, g1v, g2v)
    v = scipy.linalg.cho_solve(factor, c, check_finite=False)
    grads = {
        "log_lam_alpha": np.array(-reg.lam_alpha * (v @ alpha)),
        "log_lam_c": np.array(-reg.lam_c * (v @ (sm.U @ alpha + sm.bC))),
    }
    if train_lambda_h:
        grads["log_lam_h"] = np.array(-reg.lam_h * (v @ (sm.K @ alpha)))
    return J, grads


def _split(N, cfg, rng):
    perm = rng.permutation(N)
    n_val = min(cfg.max_validation, max(1, int(round(cfg.validation_fraction * N))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class _BatchStream:
    """Disjoint minibatches drawn without replacement from shuffled epochs."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        if self.pos + k > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + k]
        self.pos += k
        return out


def initial_params(X1, cfg, arch, rng, init=None):
    init = init or {}
    D = X1.shape[1]
    kp = init.get("kernel") or kernel.init_kernel(arch.net, arch.R, rng, arch.sigmas)
    bp = init.get("base") or basedist.BaseDensityParams.default(D, trainable=cfg.train_base)
    if "z" in init:
        z = np.array(init["z"], dtype=np.float64)
    else:
        M = cfg.n_inducing
        z = X1[rng.choice(X1.shape[0], M, replace=X1.shape[0] < M)].copy()
    lam = cfg.init_lambda
    reg = init.get("reg") or RegWeights(lam, lam, lam if cfg.train_lambda_h else 0.0)
    return Params.from_parts(kp, bp, z, reg, arch, cfg.train_lambda_h)


def _is_bad(J, grads):
    if not np.isfinite(J):
        return True
    return any(not np.all(np.isfinite(g)) for g in grads.values())


def train(data, cfg=None, arch=None, init=None, whitening=None):
    """Fit a model with the three-stage procedure.

    ``data`` are raw rows; when ``whitening`` is given it is applied first
    and attached to the returned model. Returns ``(FittedModel, TrainReport)``.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise DatasetTooSmall("data must be a 2-d array")
    if not np.all(np.isfinite(X)):
        raise NonNumeric("training data contains non-finite values")
    if whitening is not None:
        X = whitening.apply(X)
    N, D = X.shape
    arch = arch or Architecture(featnet.NetSpec(D, 3, 30), R=3)
    if N < 4 * cfg.batch_train:
        raise DatasetTooSmall(f"need at least {4 * cfg.batch_train} rows, got {N}")
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    report = TrainReport()
    i1, i2 = _split(N, cfg, rng)
    report.train_index, report.validation_index = i1, i2
    X1, X2 = X[i1], X[i2]
    params = initial_params(X1, cfg, arch, rng, init)
    noise = cfg.data_noise_std

    def elapsed():
        return time.perf_counter() - t0

    def out_of_time():
        return cfg.max_wallclock is not None and elapsed() > cfg.max_wallclock

    def noisy(x):
        return x + noise * rng.standard_normal(x.shape) if noise > 0 else x

    # stage 1
    report.stage_boundaries.append(0)
    opt = Adam(cfg.lr_stage1, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    stream = _BatchStream(X1.shape[0], rng)
    bt, bv = cfg.batch_train, cfg.batch_val
    if bt + bv > X1.shape[0]:
        bt = bv = X1.shape[0] // 2
    best = heldout_objective(params, X1, X2, cfg.threads)
    best_params = params.copy()
    since_best = 0
    report.trace.append((0, 1, "heldout", best, 1000 * elapsed()))
    step = 0
    bad_streak = 0
    while step < cfg.max_steps_stage1 and not out_of_time():
        step += 1
        idx = stream.take(bt + bv)
        Xt, Xv = noisy(X1[idx[:bt]]), noisy(X1[idx[bt:]])
        try:
            J, grads = meta_gradient(params, Xt, Xv)
        except NumericalError:
            J, grads = float("nan"), {}
        if _is_bad(J, grads):
            bad_streak += 1
            report.trace.append((step, 1, "minibatch", float("nan"), 1000 * elapsed()))
            if bad_streak >= 2:
                raise DivergedLoss(f"validation objective not finite twice in a row at step {step}")
            opt.lr *= 0.5
            log.warning("non-finite objective at step %d; halving learning rate", step)
            continue
        bad_streak = 0
        report.trace.append((step, 1, "minibatch", J, 1000 * elapsed()))
        opt.step(params.arrays, grads)
        since_best += 1
        if step % cfg.eval_every == 0:
            try:
                val = heldout_objective(params, X1, X2, cfg.threads)
            except NumericalError:
                val = float("nan")
            if not np.isfinite(val):
                log.warning("held-out objective not finite at step %d", step)
            report.trace.append((step, 1, "heldout", val, 1000 * elapsed()))
            if np.isfinite(val) and val < best:
                best, best_params, since_best = val, params.copy(), 0
            elif since_best >= cfg.patience:
                break
    params = best_params

    # stage 2: lambdas only, fit on all of X1 with one noise draw
    report.stage_boundaries.append(step)
    kp, bp = params.kernel(), params.base()
    X1n = noisy(X1)
    sm = assemble(kp, bp, params.z, X1n, threads=cfg.threads)
    if sm.K is None:
        sm = ScoreMatrices(sm.G, sm.U, kernel.gram(kp, params.z), sm.b0, sm.bC, sm.n)
    _, DK2, HK2 = kernel.cross(kp, X2, params.z)
    g12, g22 = basedist.derivs(bp, X2)
    val_terms = (DK2, HK2, g12, g22)
    all_idx = np.arange(X2.shape[0])
    lam_keys = [k for k in ("log_lam_alpha", "log_lam_c", "log_lam_h") if k in params.arrays]

    def full_val(p):
        return _lambda_step(sm, p.reg(), val_terms, all_idx, cfg.train_lambda_h)[0]

    best = full_val(params)
    best_params = params.copy()
    since_best = 0
    report.trace.append((step, 2, "heldout", best, 1000 * elapsed()))
    opt = Adam(cfg.lr_stage2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    s2 = 0
    bad_streak = 0
    while s2 < cfg.max_steps_stage2 and not out_of_time():
        s2 += 1
        step += 1
        idx = rng.choice(X2.shape[0], min(cfg.batch_val, X2.shape[0]), replace=False)
        try:
            J, grads = _lambda_step(sm, params.reg(), val_terms, idx, cfg.train_lambda_h)
        except NumericalError:
            J, grads = float("nan"), {}
        if _is_bad(J, grads):
            bad_streak += 1
            if bad_streak >= 2:
                raise DivergedLoss(f"stage-2 objective not finite twice in a row at step {step}")
            opt.lr *= 0.5
            continue
        bad_streak = 0
        opt.step(params.arrays, {k: grads[k] for k in lam_keys})
        since_best += 1
        val = full_val(params)
        report.trace.append((step, 2, "heldout", val, 1000 * elapsed()))
        if np.isfinite(val) and val < best:
            best, best_params, since_best = val, params.copy(), 0
        elif since_best >= cfg.patience:
            break
    params = best_params

    # stage 3
    report.stage_boundaries.append(step)
    alpha = solve_alpha(sm, params.reg())
    model = FittedModel(params.kernel(), params.base(), params.z.copy(), alpha, whitening)
    report.final_validation = best
    report.wallclock = elapsed()
    log.info("trained in %.1fs, held-out objective %.4f", report.wallclock, best)
    return model, report


def median_heuristic(X, max_points=2000, seed=0):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > max_points:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False)]
    d = pdist(X)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def spectral_clustering(X, n_clusters, seed=0, max_points=2000, retries=5):
    """Normalized-Laplacian spectral clustering with a Gaussian affinity.

    At most ``max_points`` rows enter the eigenproblem; remaining rows take
    the label of their nearest clustered row.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if n_clusters == 1:
        return np.zeros(N, dtype=int)
    rng = np.random.default_rng(seed)
    sub = np.sort(rng.choice(N, max_points, replace=False)) if N > max_points else np.arange(N)
    Y = X[sub]
    h = median_heuristic(Y, max_points)
    sq = np.sum((Y[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
    W = np.exp(-sq / (2 * h * h))
    np.fill_diagonal(W, 0.0)
    dinv = 1.0 / np.sqrt(W.sum(axis=1))
    L = dinv[:, None] * W * dinv[None, :]
    _, vecs = np.linalg.eigh(L)
    E = vecs[:, -n_clusters:]
    E = E / np.linalg.norm(E, axis=1, keepdims=True)
    for attempt in range(retries):
        _, labels = kmeans2(E, n_clusters, minit="++", seed=int(rng.integers(2 ** 31)))
        if np.all(np.bincount(labels, minlength=n_clusters) > 0):
            break
    else:
        raise EmptyCluster(f"k-means left a cluster empty after {retries} attempts")
    if sub.size == N:
        return labels
    out = np.empty(N, dtype=int)
    out[sub] = labels
    rest = np.setdiff1d(np.arange(N), sub)
    for a in range(0, rest.size, 1024):
        chunk = rest[a:a + 1024]
        d = np.sum((X[chunk, None, :] - Y[None, :, :]) ** 2, axis=-1)
        out[chunk] = labels[np.argmin(d, axis=1)]
    return out


def fit_mixture(data, n_clusters, cfg=None, arch=None, whiten=True):
    """Cluster, fit one model per cluster and weight by cluster size.

    Returns a list of ``(FittedModel, weight)``; each model carries its own
    whitening fitted on its cluster when ``whiten`` is set.
    """
    cfg = cfg or TrainConfig()
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    X = np.asarray(data, dtype=np.float64)
    labels = spectral_clustering(X, n_clusters, seed=cfg.seed)
    out = []
    for i in range(n_clusters):
        Xi = X[labels == i]
        if Xi.shape[0] == 0:
            raise EmptyCluster(f"cluster {i} is empty")
        w = fit_whitening(Xi) if whiten else None
        model, _ = train(Xi, replace(cfg, seed=cfg.seed + i), arch, whitening=w)
        out.append((model, Xi.shape[0] / X.shape[0]))
    return out


def predicted_separated_ratio(D, sigma, lam_alpha, pi):
    """Approximate fitted density ratio between two far-separated components
    of weights ``pi`` and ``1 - pi`` under a wide Gaussian kernel."""
    if not (sigma > 0 and lam_alpha > 0 and 0 < pi < 1):
        raise ValueError("need sigma > 0, lam_alpha > 0 and 0 < pi < 1")
    return float(np.exp(D / (2.0 * sigma ** 2 * lam_alpha) * (pi - 0.5)))
