"""Model file format.

A text header of ``key=value`` lines, terminated by a line ``end``,
followed by the concatenated little-endian float64 arrays listed in the
header by ``array=name:shape`` lines, in that order. Nothing time- or
host-dependent is written, so equal models give equal bytes.
"""

import numpy as np

from . import featnet
from .basedist import BaseDensityParams
from .errors import ModelFormatError
from .kef import FittedModel
from .kernel import KernelParams
from .preprocess import Whitening

MAGIC = "dkef-model"
VERSION = 1


def _model_arrays(model):
    kp = model.kernel
    out = [("kernel.logits", kp.logits), ("kernel.log_sigma", kp.log_sigma)]
    for r, net in enumerate(kp.nets):
        out += [(f"net{r}.{i}", a) for i, a in enumerate(net.arrays())]
    bp = model.base
    out += [("base.mu", bp.mu), ("base.log_sigma", bp.log_sigma), ("base.beta_raw", bp.beta_raw)]
    out += [("z", model.z), ("alpha", model.alpha)]
    w = model.whitening
    if w is not None:
        out += [("whitening.mean", w.mean), ("whitening.transform", w.transform),
                ("whitening.log_abs_det", np.array([w.log_abs_det]))]
    return out


def dumps(model):
    spec = model.kernel.nets[0].spec
    w = model.whitening
    head = [
        f"format={MAGIC}",
        f"version={VERSION}",
        f"dim={model.dim}",
        f"components={model.kernel.R}",
        f"net.layers={spec.layers}",
        f"net.width={spec.width}",
        f"net.skip={int(bool(spec.skip))}",
        f"inducing={model.M}",
        f"base.trainable={int(model.base.trainable)}",
        f"whitening={int(w is not None)}",
    ]
    if w is not None and w.columns is not None:
        head.append("whitening.columns=" + ",".join(str(c) for c in w.columns))
    blobs = []
    for name, a in _model_arrays(model):
        a = np.ascontiguousarray(a, dtype="<f8")
        head.append(f"array={name}:{','.join(str(s) for s in a.shape)}")
        blobs.append(a.tobytes())
    head.append("end")
    return ("\n".join(head) + "\n").encode("ascii") + b"".join(blobs)


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def _shape(text):
    return tuple(int(s) for s in text.split(",")) if text else ()


def loads(data):
    end = data.find(b"\nend\n")
    if end < 0:
        raise ModelFormatError("missing header terminator")
    try:
        lines = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise ModelFormatError("header is not ASCII") from None
    meta, arrays = {}, []
    for line in lines:
        key, sep, val = line.partition("=")
        if not sep:
            raise ModelFormatError(f"malformed header line {line!r}")
        if key == "array":
            name, _, shape = val.partition(":")
            arrays.append((name, _shape(shape)))
        else:
            meta[key] = val
    if meta.get("format") != MAGIC:
        raise ModelFormatError("not a model file")
    if meta.get("version") != str(VERSION):
        raise ModelFormatError(f"unsupported model file version {meta.get('version')}")
    body = memoryview(data)[end + 5:]
    store, pos = {}, 0
    for name, shape in arrays:
        n = int(np.prod(shape)) * 8
        if pos + n > len(body):
            raise ModelFormatError("model file truncated")
        store[name] = np.frombuffer(body[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(body):
        raise ModelFormatError("trailing bytes after arrays")
    try:
        D = int(meta["dim"])
        R = int(meta["components"])
        spec = featnet.NetSpec(D, int(meta["net.layers"]), int(meta["net.width"]), bool(int(meta["net.skip"])))
        n_arr = len(featnet.zero_params(spec).arrays())
        nets = tuple(featnet.NetParams.from_arrays(spec, [store[f"net{r}.{i}"] for i in range(n_arr)])
                     for r in range(R))
        kp = KernelParams(store["kernel.logits"], store["kernel.log_sigma"], nets)
        bp = BaseDensityParams(store["base.mu"], store["base.log_sigma"], store["base.beta_raw"],
                               bool(int(meta["base.trainable"])))
        w = None
        if meta["whitening"] == "1":
            cols = meta.get("whitening.columns")
            cols = tuple(int(c) for c in cols.split(",")) if cols else None
            w = Whitening(store["whitening.mean"], store["whitening.transform"],
                          float(store["whitening.log_abs_det"][0]), cols)
        return FittedModel(kp, bp, store["z"], store["alpha"], w)
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent model file: {exc}") from None


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
