"""Dataset ingestion: CSV parsing, constant-column removal, dequantization
and PCA whitening."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFile, NonNumeric, ParseError

log = logging.getLogger(__name__)

WHITEN_MAX_ROWS = 10_000


@dataclass(frozen=True)
class Whitening:
    """Affine map ``u = transform @ (x - mean)``."""

    mean: np.ndarray
    transform: np.ndarray
    log_abs_det: float
    columns: tuple | None = None  # raw-file columns kept before whitening

    @property
    def dim(self):
        return self.mean.shape[0]

    def select(self, raw):
        """Pick the kept columns out of rows read from the original file."""
        raw = np.asarray(raw, dtype=np.float64)
        return raw if self.columns is None else raw[:, list(self.columns)]

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.transform.T

    def invert(self, u):
        return np.linalg.solve(self.transform, np.asarray(u, dtype=np.float64).T).T + self.mean

    @classmethod
    def identity(cls, D):
        return cls(np.zeros(D), np.eye(D), 0.0)


def fit_whitening(data, max_rows=WHITEN_MAX_ROWS, seed=0):
    """Whitening from the eigendecomposition of the covariance of at most
    ``max_rows`` rows."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] > max_rows:
        idx = np.random.default_rng(seed).choice(data.shape[0], max_rows, replace=False)
        idx.sort()
        sub = data[idx]
    else:
        sub = data
    mean = sub.mean(axis=0)
    cov = np.atleast_2d(np.cov(sub, rowvar=False))
    evals, evecs = np.linalg.eigh(cov)
    if np.any(evals <= 0):
        raise ParseError("covariance is singular; cannot whiten")
    # symmetric inverse square root: unique for a given covariance and the
    # identity on data that are already white
    transform = (evecs / np.sqrt(evals)) @ evecs.T
    return Whitening(mean, transform, float(-0.5 * np.sum(np.log(evals))))


def read_csv(path):
    """Numeric rows from a comma-separated file; a non-numeric first row is
    treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                for j, c in enumerate(row, start=1):
                    try:
                        float(c)
                    except ValueError:
                        raise NonNumeric(f"non-numeric value {c!r}", row=lineno, col=j) from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"expected {len(rows[0])} columns, got {len(rows[-1])}", row=lineno)
    if not rows:
        raise EmptyFile(f"{path} contains no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonNumeric("non-finite value", row=int(bad[0]) + 1, col=int(bad[1]) + 1)
    return data


def drop_constant_columns(data):
    keep = np.ptp(data, axis=0) > 0
    dropped = np.flatnonzero(~keep)
    if dropped.size:
        log.info("dropping constant columns %s", dropped.tolist())
    return data[:, keep], dropped


def dequantize(data, rng):
    """Add centred uniform noise whose width is the median gap between
    adjacent distinct values of each column."""
    out = data.copy()
    for j in range(data.shape[1]):
        vals = np.unique(data[:, j])
        if vals.size < 2:
            continue
        width = float(np.median(np.diff(vals)))
        out[:, j] += rng.uniform(-0.5 * width, 0.5 * width, size=data.shape[0])
    return out


@dataclass
class IngestOptions:
    dequantize: bool = False
    whiten: bool = True
    seed: int = 0
    max_whiten_rows: int = WHITEN_MAX_ROWS


def ingest(path, options=None):
    """Load a CSV file and preprocess it. Returns ``(whitened data, Whitening)``."""
    options = options or IngestOptions()
    data = read_csv(path)
    n_cols = data.shape[1]
    data, dropped = drop_constant_columns(data)
    columns = tuple(j for j in range(n_cols) if j not in set(dropped.tolist()))
    if data.shape[1] == 0:
        raise ParseError("every column is constant")
    rng = np.random.default_rng(options.seed)
    if options.dequantize:
        data = dequantize(data, rng)
    if not options.whiten:
        w = Whitening.identity(data.shape[1])
    else:
        w = fit_whitening(data, options.max_whiten_rows, seed=options.seed)
    w = Whitening(w.mean, w.transform, w.log_abs_det, columns)
    return w.apply(data), w
