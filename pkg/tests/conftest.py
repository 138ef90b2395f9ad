import numpy as np
import pytest

from dkef import basedist, featnet, kernel
from dkef.basedist import BaseDensityParams
from dkef.kef import FittedModel


def central_diff(fn, x, h=1e-5):
    """Central differences of a scalar- or array-valued ``fn`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    f0 = np.asarray(fn(x))
    out = np.zeros(x.shape + f0.shape)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = np.asarray(fn(x))
        flat[i] = old - h
        fm = np.asarray(fn(x))
        flat[i] = old
        out.reshape((flat.size,) + f0.shape)[i] = (fp - fm) / (2 * h)
    return out


def second_diff(fn, x, d, h=1e-4):
    x = np.array(x, dtype=np.float64)
    e = np.zeros_like(x)
    e[d] = h
    return (np.asarray(fn(x + e)) - 2 * np.asarray(fn(x)) + np.asarray(fn(x - e))) / (h * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_model(rng, D=2, layers=2, width=4, R=2, M=5, beta=(2.3, 1.7)):
    spec = featnet.NetSpec(D, layers, width)
    kp = kernel.init_kernel(spec, R, rng, tuple(np.linspace(1.0, 2.0, R)))
    kp = kernel.KernelParams(rng.normal(size=R) * 0.3, kp.log_sigma, kp.nets)
    bp = basedist.BaseDensityParams.from_values(rng.normal(size=D) * 0.2, 1.0 + rng.random(D),
                                                np.resize(beta, D), trainable=True)
    z = rng.normal(size=(M, D))
    return FittedModel(kp, bp, z, rng.normal(size=M))


def gaussian_model(D, mu=0.0, sigma=1.0, M=1):
    kp = kernel.KernelParams.create([featnet.zero_params(featnet.NetSpec(D, 0))], (1.0,))
    return FittedModel(kp, BaseDensityParams.from_values(np.full(D, mu), sigma, 2.0), np.zeros((M, D)), np.zeros(M))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
