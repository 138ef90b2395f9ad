"""Log-density lattices for 2-D models: CSV values plus an 8-bit PGM heightmap."""

import numpy as np

from .errors import WrongDimension

CLIP = -9.0


def evaluate(model, bounds, resolution):
    """Log density on a ``resolution`` x ``resolution`` lattice, shifted so
    the maximum is 0 and clipped below at -9.

    Returns ``(xs, ys, values)`` with ``values[i, j]`` at ``(xs[j], ys[i])``.
    """
    if model.whitening is not None and model.whitening.columns is not None:
        raw_dim = len(model.whitening.columns)
    else:
        raw_dim = model.dim
    if raw_dim != 2:
        raise WrongDimension(f"grid export needs a 2-d model, got dimension {raw_dim}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError("bounds must be (xmin, xmax, ymin, ymax) with min < max")
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    vals = model.log_density(np.stack([gx.ravel(), gy.ravel()], axis=1)).reshape(resolution, resolution)
    vals = np.maximum(vals - vals.max(), CLIP)
    return xs, ys, vals


def to_bytes(vals):
    """Affine 8-bit quantization: -9 -> 0, 0 -> 255."""
    return np.rint((vals - CLIP) / -CLIP * 255.0).astype(np.uint8)


def write_csv(path, xs, ys, vals):
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                fh.write(f"{float(x)!r},{float(y)!r},{float(vals[i, j])!r}\n")


def write_pgm(path, vals):
    """Binary P5 image; the top row is the largest y."""
    img = to_bytes(vals)[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)[::-1]
