"""Two-dimensional synthetic densities with samplers and analytic scores."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .errors import ScoreUnavailable, ShapeMismatch, UnknownName

NAMES = ("Funnel", "Banana", "Ring", "Square", "Cosine", "MoG", "MoR")

DEFAULTS = {
    "Funnel": {},
    "Banana": {"curvature": 0.2, "scale1": 2.0},
    "Ring": {"radius": 3.0, "width": 0.2},
    "Square": {"half_side": 2.0, "blur": 0.05},
    "Cosine": {"amplitude": 2.0, "noise": 0.2},
    "MoG": {"broad": 1.0, "sharp": 0.05, "offset": 1.0},
    "MoR": {"radius": 1.0, "width": 0.1, "side": 6.0},
}


@dataclass(frozen=True)
class SynthSpec:
    name: str
    params: dict = field(default_factory=dict)
    dim: int = 2

    def __post_init__(self):
        if self.name not in DEFAULTS:
            raise UnknownName(f"unknown dataset {self.name!r}; choose from {', '.join(NAMES)}")
        if self.dim != 2:
            raise ShapeMismatch("synthetic datasets are two-dimensional")
        unknown = set(self.params) - set(DEFAULTS[self.name])
        if unknown:
            raise UnknownName(f"unknown parameters for {self.name}: {sorted(unknown)}")
        merged = {**DEFAULTS[self.name], **self.params}
        if any(v <= 0 for v in merged.values()):
            raise ValueError("synthetic dataset parameters must be positive")
        object.__setattr__(self, "params", merged)


def get(name, **params):
    """Spec lookup by case-insensitive name."""
    for n in NAMES:
        if n.lower() == str(name).lower():
            return SynthSpec(n, params)
    raise UnknownName(f"unknown dataset {name!r}; choose from {', '.join(NAMES)}")


def _mor_centers(side):
    rc = side / math.sqrt(3.0)
    ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    return rc * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample(spec, n, seed):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = spec.params
    name = spec.name
    if name == "Funnel":
        x1 = rng.standard_normal(n)
        x2 = rng.standard_normal(n) * np.exp(0.5 * x1)
        return np.stack([x1, x2], axis=1)
    if name == "Banana":
        z1 = p["scale1"] * rng.standard_normal(n)
        z2 = rng.standard_normal(n)
        return np.stack([z1, z2 + p["curvature"] * (z1 ** 2 - p["scale1"] ** 2)], axis=1)
    if name == "Ring":
        r = p["radius"] + p["width"] * rng.standard_normal(n)
        th = rng.uniform(0, 2 * np.pi, n)
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    if name == "Square":
        h = p["half_side"]
        return rng.uniform(-h, h, (n, 2)) + p["blur"] * rng.standard_normal((n, 2))
    if name == "Cosine":
        x1 = rng.uniform(-np.pi, np.pi, n)
        x2 = p["amplitude"] * np.cos(x1) + p["noise"] * rng.standard_normal(n)
        return np.stack([x1, x2], axis=1)
    if name == "MoG":
        pick = rng.random(n) < 0.5
        out = rng.standard_normal((n, 2))
        out[pick] = out[pick] * p["broad"] + [-p["offset"], 0.0]
        out[~pick] = out[~pick] * p["sharp"] + [p["offset"], 0.0]
        return out
    # MoR
    c = _mor_centers(p["side"])[rng.integers(0, 3, n)]
    r = p["radius"] + p["width"] * rng.standard_normal(n)
    th = rng.uniform(0, 2 * np.pi, n)
    return c + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _ring_logpdf(X, center, radius, width):
    d = X - center
    r = np.sqrt(np.sum(d * d, axis=1))
    return -0.5 * ((r - radius) / width) ** 2 - math.log(width * math.sqrt(2 * np.pi)) - np.log(2 * np.pi * r)


def _ring_score(X, center, radius, width):
    d = X - center
    r = np.sqrt(np.sum(d * d, axis=1))
    g = -(r - radius) / width ** 2 - 1.0 / r
    return (g / r)[:, None] * d


def _gauss_logpdf(X, mean, std):
    d = (X - mean) / std
    return -0.5 * np.sum(d * d, axis=1) - 2 * math.log(std) - math.log(2 * np.pi)


def _square_axis_score(x, h, s):
    """d/dx log(Phi((h-x)/s) - Phi((-h-x)/s)); odd in x."""
    u = -np.abs(x)
    a = (-h - u) / s
    b = (h - u) / s
    lphi_a = -0.5 * a * a
    lphi_b = -0.5 * b * b
    lcdf_a, lcdf_b = log_ndtr(-a), log_ndtr(-b)
    log_mass = lcdf_a + np.log1p(-np.exp(lcdf_b - lcdf_a))
    log_num = lphi_a + np.log1p(-np.exp(lphi_b - lphi_a)) - 0.5 * math.log(2 * np.pi)
    return -np.sign(x) * np.exp(log_num - log_mass) / s


def _square_axis_logpdf(x, h, s):
    u = -np.abs(x)
    a = (-h - u) / s
    b = (h - u) / s
    lcdf_a, lcdf_b = log_ndtr(-a), log_ndtr(-b)
    return lcdf_a + np.log1p(-np.exp(lcdf_b - lcdf_a)) - math.log(2 * h)


def _points(x):
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != 2:
        raise ShapeMismatch("synthetic densities take 2-d points")
    return X


def log_density(spec, x):
    """Normalized log density (Ring-type densities ignore the negligible
    mass of negative radii)."""
    X = _points(x)
    p = spec.params
    name = spec.name
    if name == "Funnel":
        x1, x2 = X[:, 0], X[:, 1]
        return -0.5 * x1 ** 2 - 0.5 * x2 ** 2 * np.exp(-x1) - 0.5 * x1 - math.log(2 * np.pi)
    if name == "Banana":
        c, s1 = p["curvature"], p["scale1"]
        x1, x2 = X[:, 0], X[:, 1]
        r = x2 - c * (x1 ** 2 - s1 ** 2)
        return -0.5 * (x1 / s1) ** 2 - 0.5 * r ** 2 - math.log(2 * np.pi * s1)
    if name == "Ring":
        return _ring_logpdf(X, 0.0, p["radius"], p["width"])
    if name == "Square":
        h, s = p["half_side"], p["blur"]
        return _square_axis_logpdf(X[:, 0], h, s) + _square_axis_logpdf(X[:, 1], h, s)
    if name == "Cosine":
        x1, x2 = X[:, 0], X[:, 1]
        r = (x2 - p["amplitude"] * np.cos(x1)) / p["noise"]
        inside = np.abs(x1) <= np.pi
        val = -0.5 * r * r - math.log(p["noise"] * math.sqrt(2 * np.pi)) - math.log(2 * np.pi)
        return np.where(inside, val, -np.inf)
    if name == "MoG":
        T = np.stack([
            _gauss_logpdf(X, [-p["offset"], 0.0], p["broad"]),
            _gauss_logpdf(X, [p["offset"], 0.0], p["sharp"]),
        ])
        return logsumexp(T, axis=0) + math.log(0.5)
    T = np.stack([_ring_logpdf(X, c, p["radius"], p["width"]) for c in _mor_centers(p["side"])])
    return logsumexp(T, axis=0) - math.log(3.0)


def _mixture_score(logps, scores):
    w = np.exp(logps - logsumexp(logps, axis=0))
    return np.einsum("kn,knd->nd", w, scores)


def true_score(spec, x, quadrature=False):
    """Gradient of the true log density, or raise ScoreUnavailable.

    Square has no score unless ``quadrature`` is set, in which case the
    per-axis blurred-box score is evaluated from normal CDFs.
    """
    X = _points(x)
    p = spec.params
    name = spec.name
    if name == "Funnel":
        x1, x2 = X[:, 0], X[:, 1]
        e = np.exp(-x1)
        return np.stack([-x1 - 0.5 + 0.5 * x2 ** 2 * e, -x2 * e], axis=1)
    if name == "Banana":
        c, s1 = p["curvature"], p["scale1"]
        x1, x2 = X[:, 0], X[:, 1]
        r = x2 - c * (x1 ** 2 - s1 ** 2)
        return np.stack([-x1 / s1 ** 2 + 2 * c * x1 * r, -r], axis=1)
    if name == "Ring":
        return _ring_score(X, 0.0, p["radius"], p["width"])
    if name == "Square":
        if not quadrature:
            raise ScoreUnavailable("Square has no analytic score; pass quadrature=True")
        h, s = p["half_side"], p["blur"]
        return np.stack([_square_axis_score(X[:, 0], h, s), _square_axis_score(X[:, 1], h, s)], axis=1)
    if name == "Cosine":
        A, sd = p["amplitude"], p["noise"]
        x1, x2 = X[:, 0], X[:, 1]
        r = (x2 - A * np.cos(x1)) / sd ** 2
        return np.stack([-r * A * np.sin(x1), -r], axis=1)
    if name == "MoG":
        means = [np.array([-p["offset"], 0.0]), np.array([p["offset"], 0.0])]
        stds = [p["broad"], p["sharp"]]
        logps = np.stack([_gauss_logpdf(X, m, s) for m, s in zip(means, stds)])
        scores = np.stack([-(X - m) / s ** 2 for m, s in zip(means, stds)])
        return _mixture_score(logps, scores)
    centers = _mor_centers(p["side"])
    logps = np.stack([_ring_logpdf(X, c, p["radius"], p["width"]) for c in centers])
    scores = np.stack([_ring_score(X, c, p["radius"], p["width"]) for c in centers])
    return _mixture_score(logps, scores)


def has_score(spec):
    return spec.name != "Square"


def fisher_divergence(model, spec, n, seed, quadrature=False):
    """Half the mean squared score error on ``n`` fresh draws.

    ``model`` needs a ``score(x)`` method returning data-space gradients.
    """
    X = sample(spec, n, seed)
    truth = true_score(spec, X, quadrature=quadrature)
    diff = np.asarray(model.score(X)) - truth
    return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))
