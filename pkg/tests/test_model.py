import dataclasses

import numpy as np
import pytest

from itdgp import diffgraph as dg
from itdgp import svgp
from itdgp.model import (Adam, DgpModel, ModelConfig, TrainConfig, TrainState, bernoulli_log_lik, draw_eps, elbo,
                         expected_log_lik, fit, poly_schedule, predict_proba, train_step)
from itdgp.rng import derive_rng


def _data(seed=0, n=40, d=6, frac=0.3):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < frac).astype(np.uint8)
    y[:2] = (0, 1)
    X = rng.standard_normal((n, d)) + 1.5 * y[:, None]
    return X, y


def _model(X, layers=2, m=6, seed=0):
    return DgpModel.init(X, ModelConfig(layers=layers, hidden_width=3, num_inducing=m), seed=seed)


def test_ell_at_zero_latent():
    X, y = _data()
    m = _model(X)
    eps = [np.zeros((len(y), l.output_dim)) for l in m.layers]
    ell = dg.value_of(expected_log_lik(m, X, y, [eps]))[0, 0]
    assert ell == pytest.approx(len(y) * np.log(0.5), rel=1e-12)


def test_log_lik_saturation_is_finite():
    f = np.array([[60.0], [-60.0], [800.0], [-800.0]])
    y = np.array([1, 0, 0, 1])
    v = dg.value_of(bernoulli_log_lik(f, y))[0, 0]
    assert np.isfinite(v) and v == pytest.approx(-1600.0, rel=1e-12)


def test_ell_matches_gauss_hermite():
    X, y = _data(n=12)
    m = _model(X, layers=1)
    rng = np.random.default_rng(3)
    m = m.with_params({(0, "q_mu"): rng.standard_normal((6, 1)), (0, "log_variance"): np.array([[0.0]])})
    mom = svgp.predict_moments(m.layers[0], X)
    mu, var = mom.mean[:, 0], mom.var[:, 0]
    t, w = np.polynomial.hermite_e.hermegauss(80)
    f = mu[:, None] + np.sqrt(var)[:, None] * t[None, :]
    logp = np.where(y[:, None] == 1, -np.logaddexp(0, -f), -np.logaddexp(0, f))
    exact = float((logp @ w).sum() / np.sqrt(2 * np.pi))
    S = 10_000
    draws = [[rng.standard_normal((len(y), 1))] for _ in range(S)]
    per = np.array([dg.value_of(bernoulli_log_lik(svgp.sample(m.layers[0], X, e[0]), y))[0, 0] for e in draws])
    assert abs(per.mean() - exact) < 4 * per.std() / np.sqrt(S)


def test_elbo_identity_and_kl_positive_after_step():
    X, y = _data()
    m = _model(X)
    eps = [draw_eps(m, len(y), np.random.default_rng(0))]
    value, rep = elbo(m, X, y, eps)
    assert rep.elbo == pytest.approx(rep.expected_log_lik - sum(rep.kl_per_layer), abs=1e-9)
    assert dg.value_of(value)[0, 0] == pytest.approx(rep.elbo, abs=1e-9)
    state = TrainState(np.full(3, 0.01), Adam(), np.random.default_rng(1))
    m2, _ = train_step(m, X, y, 1, state)
    assert all(dg.value_of(svgp.kl(l))[0, 0] > 0 for l in m2.layers)


def test_fixed_batch_ascent():
    X, y = _data()
    m = _model(X)
    eps = [draw_eps(m, len(y), np.random.default_rng(0))]
    state = TrainState(np.full(51, 0.01), Adam(), np.random.default_rng(1))
    first = elbo(m, X, y, eps)[1].elbo
    for i in range(1, 51):
        m, _ = train_step(m, X, y, i, state, eps_draws=eps)
    assert elbo(m, X, y, eps)[1].elbo > first


def test_zero_likelihood_kl_decreases():
    X, y = _data()
    m = _model(X)
    state = TrainState(np.full(101, 1e-3), Adam(), np.random.default_rng(1), likelihood="zero")
    kls = []
    for i in range(1, 101):
        m, rep = train_step(m, X, y, i, state)
        kls.append(rep.kl_total)
    assert np.all(np.diff(kls) < 0)


def test_schedule():
    a = poly_schedule(0.01, 160)
    assert a[1] == 0.01 * (1 - 1 / 160) and a[160] == 0.0
    for i in range(1, 161):
        assert a[i] == a[i - 1] * (1.0 - i / 160)
    with pytest.raises(ValueError):
        poly_schedule(0.0, 5)


def test_fit_determinism_and_iteration_count():
    X, y = _data()
    cfg = TrainConfig(epochs=2)
    m1, t1 = fit(_model(X), X, y, cfg, seed=4)
    m2, t2 = fit(_model(X), X, y, cfg, seed=4)
    n_small = min(y.sum(), len(y) - y.sum())
    assert len(t1) == 2 * (len(y) // n_small) and t1 == t2
    assert t1[-1]["lr"] == 0.0
    for k, v in m1.params().items():
        assert np.array_equal(v, m2.params()[k])


def test_fit_one_epoch_and_zero_epochs():
    y = np.array([0, 1] * 4, dtype=np.uint8)
    X = np.random.default_rng(0).standard_normal((8, 4))
    m0 = _model(X, m=4)
    _, trace = fit(m0, X, y, TrainConfig(epochs=1), seed=0)
    assert len(trace) == 2 and trace[-1]["lr"] == 0.0
    m, trace = fit(m0, X, y, TrainConfig(epochs=0), seed=0)
    assert trace == [] and m is m0


def test_fit_rejects_single_class():
    X = np.zeros((5, 3))
    with pytest.raises(ValueError, match="both classes"):
        fit(_model(np.random.default_rng(0).standard_normal((5, 3)), m=3), X, np.zeros(5), TrainConfig())


def test_predict_proba_untrained_and_single_sample():
    X, y = _data(n=200)
    m = _model(X)
    p = predict_proba(m, X, n_samples=20, seed=0)
    assert p.shape == (200,) and abs(p.mean() - 0.5) < 0.02
    p1 = predict_proba(m, X, n_samples=1, seed=5)
    eps = draw_eps(m, 200, derive_rng(5, "predict"))
    f = svgp.sample(m.layers[1], svgp.sample(m.layers[0], X, eps[0]), eps[1])
    np.testing.assert_allclose(p1, dg.sigmoid(f)[:, 0], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(predict_proba(m, X, 3, seed=1, chunk=7), predict_proba(m, X, 3, seed=1))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(mean_fn="linear")
    with pytest.raises(ValueError):
        TrainConfig(mc_pred=0)
    with pytest.raises(ValueError):
        dataclasses.replace(TrainConfig(), batching="random")


def test_init_kernel_scales_per_layer():
    X, _ = _data(d=6)
    cfg = ModelConfig(layers=3, hidden_width=4, num_inducing=5, variance_hidden=0.02, variance_output=0.5,
                      omega_scale=0.25)
    m = DgpModel.init(X, cfg, seed=0)
    assert [l.kernel.variance for l in m.layers] == pytest.approx([0.02, 0.02, 0.5])
    for l, d in zip(m.layers, (6, 4, 4)):
        np.testing.assert_allclose(l.kernel.omega, 0.25 * d)
    with pytest.raises(ValueError):
        ModelConfig(omega_scale=0.0)
