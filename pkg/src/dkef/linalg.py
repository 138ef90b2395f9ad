"""Dense linear algebra helpers: SPD solves with a jitter ladder and an
order-fixed matrix-vector product."""

import logging

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonFinite, NotSymmetric, SingularAfterJitter

log = logging.getLogger(__name__)

JITTER_LADDER = (1e-12, 1e-10, 1e-8)
SYMMETRY_TOL = 1e-9


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has non-finite entries")
    return a


def as_vector(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a 1-d vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("vector has non-finite entries")
    return x


def check_symmetric(a, tol=SYMMETRY_TOL):
    if a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")


def cho_factor_jitter(a):
    """Cholesky factor of ``a``, retrying with growing diagonal jitter.

    Returns ``(factor, jitter)`` where ``jitter`` is the absolute amount
    added to the diagonal (0.0 when none was needed).
    """
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    mean_diag = float(np.mean(np.diag(a)))
    if not mean_diag > 0:
        mean_diag = 1.0
    eye = np.eye(a.shape[0])
    for rel in JITTER_LADDER:
        jitter = rel * mean_diag
        try:
            factor = scipy.linalg.cho_factor(a + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        log.debug("cholesky needed jitter %.3g", jitter)
        return factor, jitter
    raise SingularAfterJitter("matrix is not positive definite even after jitter")


def spd_solve(a, rhs):
    """Solve ``a x = rhs`` for symmetric positive definite ``a``.

    ``rhs`` may be a vector or a matrix of right-hand sides.
    """
    a = as_matrix(a)
    check_symmetric(a)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"rhs length {rhs.shape[0]} != matrix size {a.shape[0]}")
    # solve against the exactly symmetric part so the factorization ignores rounding asymmetry
    a = 0.5 * (a + a.T)
    factor, _ = cho_factor_jitter(a)
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def matvec(a, x):
    """Row-wise dot products accumulated left to right over the columns.

    Bit-identical to the textbook triple loop; slower than BLAS but the
    summation order does not depend on the BLAS build.
    """
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by vector of length {x.shape[0]}")
    out = np.zeros(a.shape[0])
    for j in range(a.shape[1]):
        out += a[:, j] * x[j]
    return out
