import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mtsattack import data
from mtsattack.diffkit import Graph
from mtsattack.models import (
    LINEAR_VAR,
    RECURRENT,
    FitConfig,
    compute_scale,
    Window,
    conditional_nll,
    fit,
    init_params,
    linear_var_params,
    load_checkpoint,
    log_likelihood,
    predictive_cov_closed_form,
    predictive_mean_closed_form,
    rollout,
    sample_paths,
    save_checkpoint,
    training_nll,
)


def _var_windows(A, length, seed, mean=10.0, noise_sd=0.5, T=8, tau=4):
    spec = data.SyntheticSpec(coef=np.asarray(A), noise_sd=noise_sd, length=length, seed=seed, mean=mean)
    ds = data.generate(spec)
    return data.make_windows(ds, T, tau, stride=tau)


def test_log_likelihood_standard_normal_at_mean():
    ll = log_likelihood(np.zeros(2), np.zeros(2), np.ones(2), V=np.zeros((2, 1)))
    assert ll == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert ll == pytest.approx(-1.837877, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_log_likelihood_matches_dense_covariance(seed):
    rng = np.random.default_rng(seed)
    d, r = 5, 2
    y, mean = rng.normal(size=d), rng.normal(size=d)
    diag = rng.uniform(0.2, 2.0, d)
    V = rng.normal(size=(d, r))
    dense = stats.multivariate_normal(mean, np.diag(diag) + V @ V.T).logpdf(y)
    assert log_likelihood(y, mean, diag, V) == pytest.approx(dense, abs=1e-10)


def test_log_likelihood_rejects_non_positive_diag():
    with pytest.raises(ValueError):
        log_likelihood(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))


def test_closed_form_mean_examples():
    p = linear_var_params(0.5 * np.eye(2), 1.0, horizon=2)
    np.testing.assert_allclose(predictive_mean_closed_form(p, np.ones((2, 3)), 2), [0.25, 0.25])
    q = linear_var_params(np.eye(2), 1.0, horizon=5)
    x = np.array([[0.0, 3.0], [1.0, -2.0]])
    for h in range(1, 6):
        np.testing.assert_array_equal(predictive_mean_closed_form(q, x, h), x[:, -1])
    with pytest.raises(TypeError):
        predictive_mean_closed_form(init_params(RECURRENT, 2, 3, hidden=4, rank=1), x, 1)


def test_zero_noise_paths_are_iterated_means():
    rng = np.random.default_rng(0)
    A = rng.uniform(-0.3, 0.3, (3, 3))
    p = linear_var_params(A, 0.2, horizon=4, bias=np.array([0.1, 0.0, -0.2]))
    x = rng.normal(size=(3, 6))
    s = sample_paths(p, x, 3, seed=0, zero_noise=True)
    for h in range(1, 5):
        for j in range(3):
            np.testing.assert_allclose(s.paths[j, :, h - 1], predictive_mean_closed_form(p, x, h), atol=1e-12)


def test_same_seed_same_paths():
    p = init_params(RECURRENT, 3, 5, hidden=6, rank=2, seed=1)
    x = np.random.default_rng(0).uniform(1.0, 2.0, (3, 7))
    a = sample_paths(p, x, 4, seed=11).paths
    b = sample_paths(p, x, 4, seed=11).paths
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("h,A_seed", [(2, None), (3, 5)])
def test_sampled_mean_matches_closed_form(h, A_seed):
    if A_seed is None:
        A = np.array([[0.5, 0.2], [0.0, 0.5]])
    else:
        A = np.random.default_rng(A_seed).uniform(-0.4, 0.4, (2, 2))
    p = linear_var_params(A, np.array([0.3, 0.5]), horizon=h)
    x = np.array([[0.0, 1.0], [0.0, -2.0]])
    n = 100_000
    s = sample_paths(p, x, n, seed=3)
    mc = s.paths[:, :, h - 1]
    se = mc.std(axis=0) / np.sqrt(n)
    exact = predictive_mean_closed_form(p, x, h)
    assert np.all(np.abs(mc.mean(axis=0) - exact) <= 3 * se)
    if A_seed is None:
        np.testing.assert_allclose(exact, np.linalg.matrix_power(A, 2) @ x[:, -1])
    np.testing.assert_allclose(np.cov(mc.T), predictive_cov_closed_form(p, h), atol=0.02)


def test_step_covariance_converges_to_diag_plus_lowrank():
    d, r, n = 4, 2, 40_000
    p = init_params(RECURRENT, d, 1, hidden=5, rank=r, seed=2)
    V = np.random.default_rng(4).normal(0.0, 0.5, (d, r))
    sd = np.array([0.2, 0.4, 0.3, 0.5])
    arrays = dict(p.arrays)
    arrays.update(W_sd=np.zeros_like(arrays["W_sd"]), b_sd=np.log(np.expm1(sd - 1e-4)), V=V)
    p = p.with_arrays(arrays)
    s = sample_paths(p, np.ones((d, 3)), n, seed=0)
    emp = np.cov(s.paths[:, :, 0].T)
    target = np.diag(sd ** 2) + V @ V.T
    assert np.linalg.norm(emp - target) <= 5 / np.sqrt(n)


def test_pathwise_gradient_matches_closed_form_jacobian():
    rng = np.random.default_rng(7)
    d, T, tau = 3, 4, 3
    A = rng.uniform(-0.4, 0.4, (d, d))
    p = linear_var_params(A, 0.3, horizon=tau)
    x0 = rng.uniform(1.0, 2.0, (d, T))
    g = Graph()
    x = g.leaf("x", x0)
    eps = np.random.default_rng(0).standard_normal((1, 10_000, tau, d))
    steps = rollout(p, x.reshape(1, d, T), eps)
    obj = steps[-1][:, :, 0].mean()
    grad = g.backward(obj)["x"]
    jac = np.zeros((d, T))
    jac[:, -1] = np.linalg.matrix_power(A, tau)[0]
    assert np.max(np.abs(grad - jac)) / np.max(np.abs(jac)) <= 1e-3


def test_fit_recovers_var_coefficients():
    A = np.array([[0.5, 0.2], [0.0, 0.5]])
    wins = _var_windows(A, 5000, seed=0, T=1, tau=1)
    p = fit(wins, FitConfig(kind=LINEAR_VAR))
    s = p.scale
    A_hat = np.diag(s) @ p.arrays["coef"][0] @ np.diag(1.0 / s)
    assert np.max(np.abs(A_hat - A)) <= 0.1


def test_fit_decreases_nll_and_respects_tolerance():
    A = np.array([[0.6, 0.1], [0.2, 0.4]])
    wins = _var_windows(A, 400, seed=1)
    cfg = FitConfig(kind=RECURRENT, hidden=6, rank=1, epochs=40, lr=0.05, seed=0)
    init = init_params(RECURRENT, 2, 4, compute_scale(wins), hidden=6, rank=1, seed=0)
    hist = []
    p = fit(wins, cfg, history=hist)
    assert training_nll(p, wins) < training_nll(init, wins)
    best = np.minimum.accumulate(hist)
    assert np.all(np.array(hist)[1:] <= best[:-1] + cfg.nll_tolerance)


def test_linear_var_adam_approaches_ols():
    A = np.array([[0.6, 0.1], [0.2, 0.4]])
    wins = _var_windows(A, 1500, seed=2)
    ols = fit(wins, FitConfig(kind=LINEAR_VAR))
    adam = fit(wins, FitConfig(kind=LINEAR_VAR, method="adam", epochs=400, lr=0.02, rank=0))
    assert training_nll(ols, wins) <= training_nll(adam, wins) + 1e-6
    assert training_nll(adam, wins) - training_nll(ols, wins) < 0.05


def test_constant_series_recurrent_mean():
    x = np.full((1, 40), 7.0)
    wins = [Window(x[:, s:s + 8], x[:, s + 8:s + 10], window_id=i) for i, s in enumerate(range(0, 30, 2))]
    p = fit(wins, FitConfig(kind=RECURRENT, hidden=4, rank=1, epochs=30, lr=0.02))
    m = sample_paths(p, x[:, :8], 200, seed=0).paths.mean(axis=0)
    assert np.all(np.abs(m / 7.0 - 1.0) <= 0.05)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        fit([], FitConfig())


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = init_params(RECURRENT, 3, 4, np.array([1.5, 2.0, 0.1]), hidden=5, rank=2, seed=9)
    path = tmp_path / "m.json"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.kind == p.kind and q.config == p.config
    assert q.scale.tobytes() == p.scale.tobytes()
    for k, v in p.arrays.items():
        assert q.arrays[k].tobytes() == v.tobytes()


def test_window_validation():
    with pytest.raises(ValueError):
        Window(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        Window(np.array([[1.0, np.nan]]), np.ones((1, 1)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 4))
def test_conditional_nll_is_exact_gaussian_for_var(seed, h):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-0.5, 0.5, (2, 2))
    sd = rng.uniform(0.2, 1.0, 2)
    p = linear_var_params(A, sd, horizon=h)
    X = rng.normal(size=(1, 2, 3))
    Y = rng.normal(size=(1, 2, h))
    _, node = conditional_nll(p, X, Y, trainable=False)
    prev = np.concatenate([X[0, :, -1:], Y[0, :, :-1]], axis=1)
    ll = sum(stats.norm(A @ prev[:, t], sd).logpdf(Y[0, :, t]).sum() for t in range(h))
    assert float(node.value) == pytest.approx(-ll / h, abs=1e-10)
