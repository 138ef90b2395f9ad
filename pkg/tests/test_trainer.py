import numpy as np
import pytest

from dkef import basedist, featnet, kernel, synthdata, trainer
from dkef.errors import DatasetTooSmall, DivergedLoss, NonNumeric
from dkef.kef import FittedModel, RegWeights, assemble, score_loss, solve_alpha
from dkef.trainer import (Adam, Architecture, Params, TrainConfig, fit_mixture, meta_gradient,
                          predicted_separated_ratio, spectral_clustering, train)

SMALL = dict(n_inducing=20, batch_train=50, batch_val=50, max_steps_stage1=40, max_steps_stage2=20, eval_every=5)


def small_params(rng, train_lambda_h=False, R=2, D=2, M=5):
    arch = Architecture(featnet.NetSpec(D, 2, 4), R=R)
    kp = kernel.init_kernel(arch.net, R, rng, tuple(np.linspace(1.0, 2.0, R)))
    bp = basedist.BaseDensityParams.from_values(rng.normal(size=D) * 0.1, [1.5, 2.5][:D], [2.3, 1.7][:D], True)
    reg = RegWeights(0.05, 0.02, 0.03 if train_lambda_h else 0.0)
    return Params.from_parts(kp, bp, rng.normal(size=(M, D)), reg, arch, train_lambda_h)


def test_meta_gradient_finite_differences(rng):
    p = small_params(rng, train_lambda_h=True)
    Xt, Xv = rng.normal(size=(20, 2)), rng.normal(size=(15, 2))
    _, g = meta_gradient(p, Xt, Xv)
    h = 1e-4
    for k, arr in p.arrays.items():
        num = np.zeros(arr.size)
        for i in range(arr.size):
            q = p.copy()
            q.arrays[k].reshape(-1)[i] += h
            jp, _ = meta_gradient(q, Xt, Xv)
            q.arrays[k].reshape(-1)[i] -= 2 * h
            jm, _ = meta_gradient(q, Xt, Xv)
            num[i] = (jp - jm) / (2 * h)
        ana = g[k].reshape(-1)
        assert np.linalg.norm(ana - num) <= 1e-3 * max(np.linalg.norm(num), 1e-8), k


def test_isolated_inducing_point_has_zero_gradient(rng):
    p = small_params(rng)
    p.arrays["z"][0] = [1e3, -1e3]
    Xt, Xv = rng.normal(size=(20, 2)), rng.normal(size=(15, 2))
    _, g = meta_gradient(p, Xt, Xv)
    assert np.max(np.abs(g["z"][0])) <= 1e-12


def test_duplicate_components_share_gradients(rng):
    p = small_params(rng, R=2)
    for i in range(len([k for k in p.arrays if k.startswith("net0.")])):
        p.arrays[f"net1.{i}"] = p.arrays[f"net0.{i}"].copy()
    p.arrays["log_sigma"][1] = p.arrays["log_sigma"][0]
    p.arrays["logits"][:] = 0.0
    _, g = meta_gradient(p, rng.normal(size=(20, 2)), rng.normal(size=(15, 2)))
    for i in range(len([k for k in p.arrays if k.startswith("net0.")])):
        np.testing.assert_allclose(g[f"net0.{i}"], g[f"net1.{i}"], rtol=1e-12, atol=1e-14)
    assert g["log_sigma"][0] == pytest.approx(g["log_sigma"][1], rel=1e-12)


def test_adam_first_step_moves_by_lr():
    arrays = {"w": np.array([1.0, -2.0])}
    opt = Adam(0.1)
    opt.step(arrays, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(arrays["w"], [0.9, -1.9], rtol=1e-6)


def gaussian_data(n, seed):
    return np.random.default_rng(seed).normal(size=(n, 2))


def test_train_beats_base_density():
    X = gaussian_data(5000, 0)
    cfg = TrainConfig(n_inducing=100, max_steps_stage1=150, max_steps_stage2=100)
    model, rep = train(X, cfg, Architecture(featnet.NetSpec(2, 3, 30), R=1))
    X2 = X[rep.validation_index]
    zero = model.with_alpha(np.zeros(model.M))
    assert rep.final_validation <= score_loss(zero, X2) - 0.05


def test_zero_learning_rate_reproduces_direct_solve():
    X = gaussian_data(600, 1)
    cfg = TrainConfig(**SMALL, lr_stage1=0.0, lr_stage2=0.0, patience=1, data_noise_std=0.0)
    model, rep = train(X, cfg, Architecture(featnet.NetSpec(2, 2, 4), R=1))
    assert rep.stage_boundaries == [0, SMALL["eval_every"], SMALL["eval_every"] + 1]
    lam = cfg.init_lambda
    sm = assemble(model.kernel, model.base, model.z, X[rep.train_index])
    np.testing.assert_allclose(model.alpha, solve_alpha(sm, RegWeights(lam, lam)), rtol=1e-12, atol=1e-12)


def test_train_is_deterministic():
    X = gaussian_data(600, 2)
    cfg = TrainConfig(**SMALL, seed=4)
    arch = Architecture(featnet.NetSpec(2, 2, 4), R=2)
    m1, r1 = train(X, cfg, arch)
    m2, r2 = train(X, cfg, arch)
    for a, b in [(m1.alpha, m2.alpha), (m1.z, m2.z), (m1.kernel.log_sigma, m2.kernel.log_sigma)]:
        assert np.array_equal(a, b)
    assert [t[:4] for t in r1.trace] == [t[:4] for t in r2.trace]


def test_dataset_too_small():
    with pytest.raises(DatasetTooSmall):
        train(gaussian_data(399, 0), TrainConfig())


def test_non_finite_data_rejected():
    X = gaussian_data(600, 3)
    X[5, 1] = np.nan
    with pytest.raises(NonNumeric):
        train(X, TrainConfig(**SMALL))


def _nan_after(monkeypatch, bad_steps):
    real = trainer.meta_gradient
    calls = {"n": 0}

    def fake(params, Xt, Xv):
        calls["n"] += 1
        J, g = real(params, Xt, Xv)
        return (float("nan"), g) if calls["n"] in bad_steps else (J, g)

    monkeypatch.setattr(trainer, "meta_gradient", fake)


def test_two_consecutive_nans_abort(monkeypatch):
    _nan_after(monkeypatch, {3, 4})
    with pytest.raises(DivergedLoss):
        train(gaussian_data(600, 3), TrainConfig(**SMALL), Architecture(featnet.NetSpec(2, 1, 3), R=1))


def test_single_nan_skips_step(monkeypatch):
    _nan_after(monkeypatch, {3})
    _, rep = train(gaussian_data(600, 3), TrainConfig(**SMALL), Architecture(featnet.NetSpec(2, 1, 3), R=1))
    mb = [t for t in rep.trace if t[2] == "minibatch"]
    assert np.isnan(mb[2][3]) and all(np.isfinite(t[3]) for t in mb[3:])


@pytest.mark.parametrize("name", synthdata.NAMES)
def test_trace_finite_on_synthetic(name):
    X = synthdata.sample(synthdata.get(name), 800, 5)
    X = (X - X.mean(0)) / X.std(0)
    _, rep = train(X, TrainConfig(**SMALL), Architecture(featnet.NetSpec(2, 2, 8), R=1))
    assert all(np.isfinite(t[3]) for t in rep.trace)


@pytest.mark.parametrize("seed", range(3))
def test_spectral_clustering_separated_gaussians(seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(150, 2)), rng.normal(size=(250, 2)) + [40.0, 0.0]])
    truth = np.r_[np.zeros(150, int), np.ones(250, int)]
    labels = spectral_clustering(X, 2, seed=seed)
    agree = max(np.sum(labels == truth), np.sum(labels == 1 - truth))
    assert agree == X.shape[0]


def test_spectral_clustering_subsample_extension():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(700, 2)), rng.normal(size=(700, 2)) + [40.0, 0.0]])
    labels = spectral_clustering(X, 2, max_points=300)
    assert len(set(labels[:700])) == 1 and len(set(labels[700:])) == 1 and labels[0] != labels[-1]


def test_fit_mixture_single_cluster_matches_train():
    X = gaussian_data(600, 6)
    cfg = TrainConfig(**SMALL)
    arch = Architecture(featnet.NetSpec(2, 1, 3), R=1)
    (m, w), = fit_mixture(X, 1, cfg, arch, whiten=False)
    m2, _ = train(X, cfg, arch)
    assert w == 1.0 and np.array_equal(m.alpha, m2.alpha)


def test_fit_mixture_weights():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(size=(450, 2)), rng.normal(size=(550, 2)) + [40.0, 0.0]])
    comps = fit_mixture(X, 2, TrainConfig(**SMALL), Architecture(featnet.NetSpec(2, 1, 3), R=1))
    assert sum(w for _, w in comps) == pytest.approx(1.0)
    assert sorted(round(w, 3) for _, w in comps) == [0.45, 0.55]


def test_predicted_separated_ratio():
    assert predicted_separated_ratio(2, 3.0, 0.1, 0.5) == 1.0
    assert predicted_separated_ratio(2, 10.0, 0.01, 0.75) == pytest.approx(np.exp(0.25), rel=1e-14)
    for pi in (0.1, 0.3, 0.8):
        assert predicted_separated_ratio(3, 2.0, 0.2, pi) * predicted_separated_ratio(3, 2.0, 0.2, 1 - pi) == \
            pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        predicted_separated_ratio(2, 1.0, 0.1, 1.0)
