import math

import numpy as np
import pytest
from scipy.special import comb

from dkef import basedist, evalsuite, featnet, kernel
from dkef.basedist import BaseDensityParams
from dkef.errors import TooFewRows
from dkef.kef import FittedModel
from dkef.preprocess import fit_whitening

from conftest import gaussian_model


class QuadraticTilt:
    """exp(f) q0 is a centred Gaussian with standard deviation ``s``."""

    def __init__(self, D, s, sigma0):
        self.base = BaseDensityParams.from_values(np.zeros(D), sigma0, 2.0)
        self.c = 0.5 * (1 / s ** 2 - 1 / sigma0 ** 2)

    def f(self, y):
        return -self.c * np.sum(y * y, axis=1)


def test_fssd_well_specified_small():
    X = np.random.default_rng(0).normal(size=(100_000, 2))
    assert 0 <= evalsuite.fssd2(gaussian_model(2), X, seed=1) <= 1e-3


def test_fssd_shifted_model_larger():
    X = np.random.default_rng(1).normal(size=(10_000, 2))
    good = evalsuite.fssd2(gaussian_model(2), X, seed=2)
    bad = evalsuite.fssd2(gaussian_model(2, mu=5.0), X, seed=2)
    assert bad >= 10 * good


def test_fssd_order_invariance(rng):
    X = rng.normal(size=(500, 2))
    m = gaussian_model(2, mu=0.5)
    a = evalsuite.fssd2(m, X, seed=3)
    assert evalsuite.fssd2(m, X[rng.permutation(500)], seed=3) == pytest.approx(a, rel=1e-12)
    V = evalsuite.choose_locations(X, 100, seed=3)
    assert evalsuite.fssd2(m, X, locations=V[::-1]) == pytest.approx(a, rel=1e-12)


def test_fssd_too_few_rows(rng):
    with pytest.raises(TooFewRows):
        evalsuite.fssd2(gaussian_model(2), rng.normal(size=(5, 2)), n_locations=10)


def test_log_z_alpha_zero_exact():
    m = gaussian_model(3, sigma=1.7)
    est = evalsuite.estimate_log_z(m, 5000, 0)
    assert est.log_z == basedist.log_partition(m.base) and est.variance == 0.0


def test_log_z_constant_f_exact():
    kp = kernel.KernelParams.create([featnet.zero_params(featnet.NetSpec(2, 2, 3))], (1.0,))
    m = FittedModel(kp, BaseDensityParams.default(2), np.zeros((3, 2)), np.array([0.5, 0.25, 1.0]))
    est = evalsuite.estimate_log_z(m, 3000, 1)
    assert est.log_z == 1.75 + basedist.log_partition(m.base)


def test_log_z_gaussian_within_standard_errors():
    model = QuadraticTilt(2, 0.8, 1.5)
    est = evalsuite.estimate_log_z(model, 1_000_000, 7)
    se = math.sqrt(est.variance / est.n) / math.exp(est.log_z - est.shift - basedist.log_partition(model.base))
    assert abs(est.log_z - math.log(2 * math.pi * 0.64)) <= 4 * se


def test_log_z_error_shrinks_like_inverse_sqrt():
    model = QuadraticTilt(2, 0.8, 1.5)
    truth = math.log(2 * math.pi * 0.64)
    Us = [1000, 10_000, 100_000]
    rmse = [math.sqrt(np.mean([(evalsuite.estimate_log_z(model, U, s).log_z - truth) ** 2 for s in range(30)]))
            for U in Us]
    slope = np.polyfit(np.log(Us), np.log(rmse), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_log_z_deterministic_and_batch_stable():
    model = QuadraticTilt(2, 0.8, 1.5)
    a = evalsuite.estimate_log_z(model, 50_000, 3, batch=50_000)
    b = evalsuite.estimate_log_z(model, 50_000, 3, batch=7_000)
    c = evalsuite.estimate_log_z(model, 50_000, 3, batch=50_000)
    assert a.log_z == c.log_z
    assert b.log_z == pytest.approx(a.log_z, abs=0.02)


def test_psi_identity():
    for Z in (0.1, 1.0, 37.0):
        assert evalsuite.psi(Z, Z) == 0.0


def test_bias_bound_constant_weights():
    bb = evalsuite.bias_bound(lambda n, rng: np.full(n, 0.3), 0.3, 10)
    assert 0 <= bb.bound <= 1e-12


def two_valued_true_bias(U):
    return math.log(2) - sum(comb(U, k) / 2 ** U * math.log((3 * k + (U - k)) / U) for k in range(U + 1))


def test_bias_bound_two_valued():
    bb = evalsuite.bias_bound(lambda n, rng: np.log(rng.choice([1.0, 3.0], n)), 0.0, 10)
    assert bb.bound >= two_valued_true_bias(10) > 0
    assert bb.degenerate


def test_bias_bound_lognormal_weights_covers_simulated_bias():
    sampler = lambda n, rng: 0.5 * rng.standard_normal(n)
    U = 20
    bb = evalsuite.bias_bound(sampler, -8.0, U, seed=2)
    rng = np.random.default_rng(9)
    logz = 0.125
    sim = logz - np.mean(np.log(np.mean(np.exp(0.5 * rng.standard_normal((200_000, U))), axis=1)))
    assert bb.bound >= sim > 0


def test_bias_bound_scale_invariant():
    s = lambda n, rng: np.log(rng.choice([1.0, 3.0], n))
    a = evalsuite.bias_bound(s, 0.0, 10, seed=4).bound
    b = evalsuite.bias_bound(lambda n, rng: s(n, rng) + 300.0, 300.0, 10, seed=4).bound
    assert b == pytest.approx(a, rel=1e-9)


def test_model_bias_bound_finite(rng):
    m = gaussian_model(2, M=3).with_alpha(np.array([0.4, -0.3, 0.2]))
    m = FittedModel(m.kernel, m.base, rng.normal(size=(3, 2)), m.alpha)
    bb = evalsuite.model_bias_bound(m, 10_000, pilot=10_000, n_z=10_000)
    assert np.isfinite(bb.bound) and bb.bound >= 0


@pytest.mark.parametrize("t", [0.5, 1.0, 5.0])
def test_chi_convex(t):
    assert evalsuite.chi_convexity_check(t)
    assert evalsuite.chi_convexity_check(t, np.linspace(0.1, 10, 99) * t)


def test_chi_singularity_fill():
    t = 2.0
    x, y = evalsuite.chi_on_grid(t, np.linspace(1.0, 3.0, 21))
    i = int(np.argmin(np.abs(x - t)))
    trend = 0.5 * (y[i - 1] + y[i + 1])
    assert abs(y[i] - trend) <= 0.01 * abs(trend)
    assert y[i] == pytest.approx(1 / (2 * t * t), rel=1e-3)


def test_evaluate_gaussian_loglik():
    X = np.random.default_rng(5).normal(size=(10_000, 2))
    rep = evalsuite.evaluate(gaussian_model(2), X, n_samples=20_000, pilot=10_000)
    assert abs(rep.loglik_per_dim + 0.5 * math.log(2 * math.pi * math.e)) <= 0.02
    vals = [rep.test_score_loss, rep.fssd2, rep.loglik_per_dim, rep.log_z_hat, rep.bias_bound]
    assert all(np.isfinite(v) for v in vals) and rep.fssd2 >= 0 and rep.bias_bound >= 0
    assert rep.fssd2 == evalsuite.fssd2(gaussian_model(2), X, seed=0)


def test_loglik_corrects_for_whitening():
    rng = np.random.default_rng(8)
    C = np.array([[4.0, 1.2], [1.2, 0.9]])
    X = rng.multivariate_normal([1.0, -2.0], C, size=5000)
    w = fit_whitening(X)
    base = gaussian_model(2)
    m = FittedModel(base.kernel, base.base, base.z, base.alpha, w)
    ll = evalsuite.log_likelihood(m, X, basedist.log_partition(m.base))
    mean = w.mean
    cov = np.cov(X, rowvar=False)
    d = X - mean
    ref = -0.5 * np.sum(d @ np.linalg.inv(cov) * d, axis=1) - 0.5 * np.log(np.linalg.det(2 * np.pi * cov))
    assert ll == pytest.approx(np.mean(ref) / 2, rel=1e-10)


def test_record_has_six_fields():
    X = np.random.default_rng(5).normal(size=(200, 2))
    rep = evalsuite.evaluate(gaussian_model(2), X, n_samples=2000, pilot=2000)
    lines = rep.record().strip().splitlines()
    keys = [ln.split("=")[0] for ln in lines]
    assert keys[:6] == list(evalsuite.EVAL_FIELDS)
