"""Evaluation: score objective, kernel Stein discrepancy, Monte Carlo
log-normalizer with a bias bound, and held-out log-likelihood."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import basedist
from .errors import EmptyBatch, ShapeMismatch, TooFewRows
from .kef import _score_terms, score_loss

log = logging.getLogger(__name__)


def choose_locations(data, n_locations, seed=0, loc_noise=0.2):
    """Random data rows plus N(0, loc_noise^2) jitter. Rows are drawn from
    the lexicographically sorted data so the choice ignores row order."""
    X = np.asarray(data, dtype=np.float64)
    if X.shape[0] < n_locations:
        raise TooFewRows(f"need at least {n_locations} rows for {n_locations} locations")
    rng = np.random.default_rng(seed)
    order = np.lexsort(X.T[::-1])
    V = X[order[rng.choice(X.shape[0], n_locations, replace=False)]]
    return V + loc_noise * rng.standard_normal(V.shape)


def fssd2(model, data, n_locations=100, seed=0, loc_noise=0.2, locations=None):
    """Squared finite-set Stein discrepancy (V-statistic) with a Gaussian
    test kernel whose bandwidth is the median distance between locations."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBatch("fssd2 needs a non-empty batch")
    if X.shape[1] != model.dim:
        raise ShapeMismatch("batch dimension does not match model")
    if locations is None:
        V = choose_locations(X, n_locations, seed, loc_noise)
    else:
        V = np.asarray(locations, dtype=np.float64)
    N, D = X.shape
    B = V.shape[0]
    d = pdist(V) if B > 1 else np.zeros(0)
    h = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    s1, _ = _score_terms(model, X)
    tau = np.zeros((B, D))
    for a in range(0, N, 4096):
        diff = X[a:a + 4096, None, :] - V[None, :, :]
        lv = np.exp(-np.sum(diff ** 2, axis=-1) / (2 * h * h))
        # xi(x, v) = l(x, v) score(x) + grad_x l(x, v)
        tau += np.sum(lv[:, :, None] * (s1[a:a + 4096, None, :] - diff / (h * h)), axis=0)
    tau /= N
    return float(np.sum(tau ** 2) / (D * B))


@dataclass
class LogZEstimate:
    log_z: float
    n: int
    variance: float  # variance of exp(f(y)) rescaled by exp(-shift)
    shift: float


def estimate_log_z(model, n, seed, batch=10_000):
    """Importance estimate of log Z with base-density proposals.

    ``Z = Z0 * E_q0[exp f(y)]``; exp f is accumulated in a running
    log-scale so large kernel values do not overflow. The variance is that
    of ``exp(f(y) - shift)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    shift = None
    count = 0
    mean = 0.0
    m2 = 0.0
    while count < n:
        k = min(batch, n - count)
        y = basedist.sample(model.base, k, rng)
        f = np.asarray(model.f(y), dtype=np.float64)
        fmax = float(np.max(f))
        if shift is None:
            shift = fmax
        elif fmax > shift:
            scale = math.exp(shift - fmax)
            mean *= scale
            m2 *= scale * scale
            shift = fmax
        w = np.exp(f - shift)
        # Chan et al. parallel Welford merge
        bm = float(w.mean())
        bm2 = float(np.sum((w - bm) ** 2))
        tot = count + k
        delta = bm - mean
        mean += delta * k / tot
        m2 += bm2 + delta * delta * count * k / tot
        count = tot
    var = m2 / (count - 1) if count > 1 else 0.0
    log_z = shift + math.log(mean) + basedist.log_partition(model.base)
    return LogZEstimate(log_z, count, var, shift)


def psi(q, Z):
    return math.log(Z / q) + q / Z - 1.0


def chi(t, x):
    """(log(x/t) + t/x - 1) / (x - t)^2; undefined (nan) at x == t."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.log(x / t) + t / x - 1.0) / (x - t) ** 2


def chi_on_grid(t, grid):
    """chi_t on a sorted grid; points within 1e-6 t of the removable
    singularity at x = t are filled by the quadratic through the three
    nearest regular grid points."""
    x = np.sort(np.asarray(grid, dtype=np.float64))
    y = chi(t, x)
    bad = np.abs(x - t) <= 1e-6 * t
    good = np.flatnonzero(~bad)
    for i in np.flatnonzero(bad):
        near = good[np.argsort(np.abs(good - i), kind="stable")[:3]]
        xs, ys = x[near], y[near]
        val = 0.0
        for j in range(3):
            others = [k for k in range(3) if k != j]
            val += ys[j] * np.prod([(x[i] - xs[k]) / (xs[j] - xs[k]) for k in others])
        y[i] = val
    return x, y


def chi_convexity_check(t, grid=None):
    """True iff the second central differences of chi_t are all positive on
    ``grid`` (default: 99 points on [0.1 t, 10 t])."""
    if t <= 0:
        raise ValueError("t must be positive")
    grid = np.linspace(0.1 * t, 10.0 * t, 99) if grid is None else grid
    if len(grid) < 3 or np.any(np.asarray(grid) <= 0):
        raise ValueError("grid needs at least 3 positive points")
    x, y = chi_on_grid(t, grid)
    d2 = y[:-2] - 2.0 * y[1:-1] + y[2:]
    return bool(np.all(d2 > 0))


@dataclass
class BiasBound:
    """Bias bound and its ingredients; ``a``, ``s``, ``t`` and ``Z`` are on
    the common scale exp(``log_scale``)."""

    bound: float
    a: float
    s: float
    t: float
    rho: float
    Z: float
    variance: float
    U: int
    log_scale: float = 0.0
    degenerate: bool = False
    notes: list = field(default_factory=list)


def _psi_log(log_q, log_z):
    return log_z - log_q + math.exp(log_q - log_z) - 1.0


def bias_bound(sample_log_r, log_a, U, pilot=100_000, n_z=100_000, seed=0, quantile=0.4, delta=1e-3):
    """Upper bound on log Z - E[log Z_hat] for the mean Z_hat of ``U``
    i.i.d. weights r >= exp(``log_a``) with mean Z.

    ``sample_log_r(n, rng)`` draws log-weights. Three independent samples
    are used: one for Z and Var[r], a pilot for ``s`` (a quantile shrunk by
    exp(-0.001)), and one for a Hoeffding upper confidence limit ``rho`` on
    Pr(r < s) at level ``delta``. The bound is invariant to rescaling r, so
    everything is computed relative to the largest log-weight seen.
    """
    if U < 1:
        raise ValueError("U must be >= 1")
    rng = np.random.default_rng(seed)
    notes = []
    lr = np.asarray(sample_log_r(n_z, rng), dtype=np.float64)
    shift = float(lr.max())
    r = np.exp(lr - shift)
    Z = float(r.mean())
    var = float(r.var(ddof=1)) if r.size > 1 else 0.0
    log_z = math.log(Z)
    lp = np.asarray(sample_log_r(pilot, rng), dtype=np.float64)
    if var <= 0.0 and np.all(lp == lr[0]):
        notes.append("weights are constant; the estimator is exact")
        one = math.exp(log_a - shift)
        return BiasBound(0.0, one, one, one, 0.0, Z, 0.0, U, shift, False, notes)
    log_s = -0.001 + float(np.quantile(lp, quantile))
    degenerate = False
    if log_s <= log_a:
        log_s = log_a + math.log1p(1e-6)
        degenerate = True
        notes.append("pilot quantile at or below the lower bound a; s set just above a")
    lh = np.asarray(sample_log_r(pilot, rng), dtype=np.float64)
    p_hat = float(np.mean(lh < log_s))
    rho = min(1.0, p_hat + math.sqrt(math.log(1.0 / delta) / (2 * pilot)))
    log_t = float(np.logaddexp(log_s, log_a)) - math.log(2.0)
    log_a_s, log_s_s, log_t_s = log_a - shift, log_s - shift, log_t - shift
    t = math.exp(log_t_s)
    out = dict(a=math.exp(log_a_s), s=math.exp(log_s_s), t=t, rho=rho, Z=Z, variance=var, U=U,
               log_scale=shift, degenerate=degenerate, notes=notes)
    if t >= Z:
        notes.append("threshold t is not below Z; bound is vacuous")
        return BiasBound(math.inf, **out)
    first = _psi_log(log_t_s, log_z) / (Z - t) ** 2 * var / U
    if rho >= 0.5:
        tail = 1.0
        notes.append("rho >= 1/2; tail probability bounded by 1")
    else:
        tail = (4 * rho * (1 - rho)) ** (U / 2.0)
    second = max(_psi_log(log_a_s, log_z), _psi_log(log_t_s, log_z)) * tail
    return BiasBound(first + second, **out)


def model_bias_bound(model, U, seed=0, pilot=100_000, n_z=100_000):
    """Bias bound for ``estimate_log_z(model, U, .)``: the weights are
    exp(f(y)), y from the base density, and since kernel values lie in
    [0, 1] they are bounded below by exp(sum of negative coefficients)."""
    log_a = float(np.sum(np.minimum(model.alpha, 0.0)))

    def sample_log_r(n, rng):
        return model.f(basedist.sample(model.base, n, rng))

    return bias_bound(sample_log_r, log_a, U, pilot=pilot, n_z=n_z, seed=seed)


EVAL_FIELDS = ("test_score_loss", "fssd2", "loglik_per_dim", "log_z_hat", "bias_bound", "n_samples")


@dataclass
class EvalReport:
    test_score_loss: float
    fssd2: float
    loglik_per_dim: float
    log_z_hat: float
    bias_bound: float
    n_samples: int
    n_test: int = 0

    def record(self):
        """Flat ``key=value`` lines."""
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in EVAL_FIELDS + ("n_test",))

    def csv_row(self):
        return ",".join(repr(getattr(self, k)) for k in EVAL_FIELDS)


def log_likelihood(model, test_raw, log_z):
    """Mean normalized log density per dimension of raw test rows,
    including the whitening Jacobian."""
    ll = model.log_density(test_raw) - log_z + model.log_abs_det
    return float(np.mean(ll) / model.dim)


def evaluate(model, test_raw, n_samples=100_000, seed=0, n_locations=100, pilot=100_000):
    """Full evaluation of a single fitted model on raw test rows."""
    X = np.asarray(test_raw, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBatch("no test rows")
    if X.shape[0] < n_locations:
        raise TooFewRows(f"need at least {n_locations} test rows")
    U = model.to_internal(X)
    lz = estimate_log_z(model, n_samples, seed)
    bb = model_bias_bound(model, n_samples, seed=seed + 1, pilot=pilot, n_z=n_samples)
    return EvalReport(
        test_score_loss=score_loss(model, U),
        fssd2=fssd2(model, U, n_locations=n_locations, seed=seed),
        loglik_per_dim=log_likelihood(model, X, lz.log_z),
        log_z_hat=lz.log_z,
        bias_bound=bb.bound,
        n_samples=n_samples,
        n_test=X.shape[0],
    )


def mixture_log_density(components, x, n_samples=100_000, seed=0):
    """Normalized log density of a weighted mixture of fitted models at raw points."""
    X = np.asarray(x, dtype=np.float64)
    terms = []
    for i, (model, w) in enumerate(components):
        lz = estimate_log_z(model, n_samples, seed + i).log_z
        terms.append(math.log(w) + model.log_density(X) - lz + model.log_abs_det)
    T = np.stack(terms)
    m = T.max(axis=0)
    return m + np.log(np.sum(np.exp(T - m), axis=0))
