"""Fully connected softplus feature network with hand-written derivatives.

The forward pass carries, for every input point, the activations ``h``,
the input Jacobian ``dh/dx`` and the diagonal of the input Hessian
``d^2 h / dx_d^2`` layer by layer. ``backward`` runs reverse mode through
that whole computation, so callers can push sensitivities on any of the
three outputs back to the weights and to the inputs.

A network with ``layers == 0`` is the identity feature map.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    layers: int = 3
    width: int = 30
    skip: bool | None = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.layers < 0 or (self.layers > 0 and self.width < 1):
            raise ValueError("need layers >= 0 and width >= 1")
        if self.skip is None:
            object.__setattr__(self, "skip", self.layers > 1)

    @property
    def out_dim(self):
        return self.width if self.layers > 0 else self.input_dim

    @property
    def has_skip(self):
        return bool(self.skip) and self.layers > 0


@dataclass(frozen=True)
class NetParams:
    spec: NetSpec
    weights: tuple
    biases: tuple
    skip: np.ndarray | None = None

    def __post_init__(self):
        s = self.spec
        if len(self.weights) != s.layers or len(self.biases) != s.layers:
            raise ShapeMismatch("number of weight matrices does not match spec.layers")
        fan_in = s.input_dim
        for w, b in zip(self.weights, self.biases):
            if w.shape != (s.width, fan_in) or b.shape != (s.width,):
                raise ShapeMismatch(f"layer shapes {w.shape}/{b.shape} inconsistent with spec")
            fan_in = s.width
        if s.has_skip:
            if self.skip is None or self.skip.shape != (s.width, s.input_dim):
                raise ShapeMismatch("skip weights missing or misshapen")
        elif self.skip is not None:
            raise ShapeMismatch("skip weights given but spec has no skip connection")

    def arrays(self):
        """Flat list of parameter arrays in a fixed order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.skip is not None:
            out.append(self.skip)
        return out

    @classmethod
    def from_arrays(cls, spec, arrays):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        n = spec.layers
        weights = tuple(arrays[0:2 * n:2])
        biases = tuple(arrays[1:2 * n:2])
        skip = arrays[2 * n] if spec.has_skip else None
        return cls(spec, weights, biases, skip)


def init_params(spec, rng):
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    weights, biases = [], []
    fan_in = spec.input_dim
    for _ in range(spec.layers):
        weights.append(rng.standard_normal((spec.width, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(spec.width))
        fan_in = spec.width
    skip = None
    if spec.has_skip:
        skip = rng.standard_normal((spec.width, spec.input_dim)) / np.sqrt(spec.input_dim)
    return NetParams(spec, tuple(weights), tuple(biases), skip)


def zero_params(spec):
    p = init_params(spec, np.random.default_rng(0))
    return NetParams.from_arrays(spec, [np.zeros_like(a) for a in p.arrays()])


def softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def sigmoid(a):
    # branch-free and overflow-safe
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _points(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ShapeMismatch(f"expected points of dimension {params.spec.input_dim}, got {x.shape}")
    return X, single


def forward_values(params, X):
    """Features only, shape (N, out_dim)."""
    X, single = _points(params, X)
    h = X
    n = params.spec.layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        if i == n - 1 and params.skip is not None:
            a = a + X @ params.skip.T
        h = softplus(a)
    return h[0] if single else h


class Trace:
    """Forward quantities kept for the reverse pass."""

    def __init__(self, X, layers, h, J, H):
        self.X = X
        self.layers = layers  # per layer: (h_in, J_in, H_in, s1, s2, Ja, Ha)
        self.h = h
        self.J = J
        self.H = H


def forward_full(params, X, keep=False):
    """Features, input Jacobian and input Hessian diagonal for a batch.

    Returns ``(h, J, H)`` with shapes (N, F), (N, F, D), (N, F, D), or a
    :class:`Trace` when ``keep`` is set.
    """
    X, _ = _points(params, X)
    N, D = X.shape
    n = params.spec.layers
    h = X
    J = None  # identity, kept implicit for the first layer
    H = None  # zero
    layers = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        top = i == n - 1
        a = h @ w.T + b
        if J is None:
            Ja = np.broadcast_to(w, (N,) + w.shape).copy()
            Ha = np.zeros_like(Ja)
        else:
            Ja = np.einsum("oi,nid->nod", w, J)
            Ha = np.einsum("oi,nid->nod", w, H)
        if top and params.skip is not None:
            a = a + X @ params.skip.T
            Ja = Ja + params.skip
        s1 = sigmoid(a)
        s2 = s1 * (1.0 - s1)
        h_new = softplus(a)
        J_new = s1[:, :, None] * Ja
        H_new = s2[:, :, None] * Ja ** 2 + s1[:, :, None] * Ha
        if keep:
            layers.append((h, J, H, s1, s2, Ja, Ha))
        h, J, H = h_new, J_new, H_new
    if J is None:
        J = np.broadcast_to(np.eye(D), (N, D, D)).copy()
        H = np.zeros((N, D, D))
    if keep:
        return Trace(X, layers, h, J, H)
    return h, J, H


def backward(params, trace, g_h, g_J=None, g_H=None):
    """Reverse pass through :func:`forward_full`.

    ``g_h``, ``g_J``, ``g_H`` are sensitivities shaped like the outputs
    (``None`` means zero). Returns ``(param_grads, g_x)`` where
    ``param_grads`` is a list aligned with ``params.arrays()`` and ``g_x``
    is the gradient with respect to the input points.
    """
    X = trace.X
    N, D = X.shape
    n = params.spec.layers
    g_h = np.asarray(g_h, dtype=np.float64)
    if g_h.shape != trace.h.shape:
        raise ShapeMismatch("value sensitivity shape mismatch")
    if g_J is not None and g_J.shape != trace.J.shape:
        raise ShapeMismatch("jacobian sensitivity shape mismatch")
    if g_H is not None and g_H.shape != trace.H.shape:
        raise ShapeMismatch("hessian sensitivity shape mismatch")
    if n == 0:
        return [], g_h.copy()
    grads_w = [None] * n
    grads_b = [None] * n
    g_skip = None
    g_x = np.zeros((N, D))
    for i in range(n - 1, -1, -1):
        w = params.weights[i]
        h_in, J_in, H_in, s1, s2, Ja, Ha = trace.layers[i]
        s3 = s2 * (1.0 - 2.0 * s1)
        g_a = g_h * s1
        g_Ja = None
        g_Ha = None
        if g_J is not None:
            g_a = g_a + s2 * np.einsum("nod,nod->no", g_J, Ja)
            g_Ja = g_J * s1[:, :, None]
        if g_H is not None:
            g_a = g_a + s3 * np.einsum("nod,nod->no", g_H, Ja ** 2) \
                + s2 * np.einsum("nod,nod->no", g_H, Ha)
            extra = 2.0 * g_H * s2[:, :, None] * Ja
            g_Ja = extra if g_Ja is None else g_Ja + extra
            g_Ha = g_H * s1[:, :, None]
        if i == n - 1 and params.skip is not None:
            g_skip = g_a.T @ X
            if g_Ja is not None:
                g_skip = g_skip + g_Ja.sum(axis=0)
            g_x += g_a @ params.skip
        gw = g_a.T @ h_in
        if J_in is None:
            # first layer: Ja = W, Ha = 0
            if g_Ja is not None:
                gw = gw + g_Ja.sum(axis=0)
            g_x += g_a @ w
            g_h = g_J = g_H = None
        else:
            if g_Ja is not None:
                gw = gw + np.einsum("nod,nid->oi", g_Ja, J_in)
            if g_Ha is not None:
                gw = gw + np.einsum("nod,nid->oi", g_Ha, H_in)
            g_h = g_a @ w
            g_J = None if g_Ja is None else np.einsum("oi,nod->nid", w, g_Ja)
            g_H = None if g_Ha is None else np.einsum("oi,nod->nid", w, g_Ha)
        grads_w[i] = gw
        grads_b[i] = g_a.sum(axis=0)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out += [gw, gb]
    if g_skip is not None:
        out.append(g_skip)
    return out, g_x


def forward(params, x):
    """Feature vector(s) for point(s) ``x``."""
    return forward_values(params, x)


def input_jacobian(params, x):
    X, single = _points(params, x)
    _, J, _ = forward_full(params, X)
    return J[0] if single else J


def input_hessian_diag(params, x):
    X, single = _points(params, x)
    _, _, H = forward_full(params, X)
    return H[0] if single else H


def param_gradients(params, x, g_value, g_jacobian=None, g_hessian=None):
    """Gradient of <outputs, sensitivities> with respect to the weights.

    Accepts a single point (sensitivities shaped like the single-point
    outputs) or a batch. Returns a :class:`NetParams`-shaped gradient.
    """
    X, single = _points(params, x)

    def lift(g):
        if g is None:
            return None
        g = np.asarray(g, dtype=np.float64)
        return g[None] if single else g

    trace = forward_full(params, X, keep=True)
    grads, _ = backward(params, trace, lift(g_value), lift(g_jacobian), lift(g_hessian))
    return NetParams.from_arrays(params.spec, grads)
