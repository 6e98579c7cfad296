"""Gaussian-process regression oracles and invariants."""

import numpy as np
import pytest
from scipy.linalg import cholesky

from microforge.errors import FitError
from microforge.gp import (
    GPHyperparameters,
    IllConditionedError,
    JITTER_START,
    _chol_with_jitter,
    _nll_and_grad,
    build_model,
    fit,
    kernel_se,
    load_model,
    nll,
    predict,
    predict_gradient,
    save_model,
)


def make_theta(w, sf2=1.0, se2=0.0):
    return GPHyperparameters.from_values(w, sf2, se2)


def dense_kernel(xa, xb, theta):
    k = np.empty((len(xa), len(xb)))
    for i, a in enumerate(xa):
        for j, b in enumerate(xb):
            k[i, j] = kernel_se(a, b, theta)
    return k


def random_problem(seed, n=5, d=2, se2=0.01):
    rng = np.random.default_rng(seed)
    x = rng.random((n, d))
    y = rng.standard_normal(n)
    theta = make_theta(rng.uniform(0.5, 20.0, d), rng.uniform(0.5, 2.0), se2)
    return x, y, theta


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def test_kernel_zero_distance():
    theta = make_theta([1.0, 1.0], sf2=2.5)
    x = np.array([0.3, 0.7])
    assert kernel_se(x, x, theta) == pytest.approx(2.5)


def test_kernel_hand_value():
    theta = make_theta([1.0], sf2=1.0)
    assert kernel_se([0.0], [2.0], theta) == pytest.approx(np.exp(-2.0))
    assert kernel_se([0.0], [2.0], theta) == pytest.approx(0.135335, abs=1e-6)


def test_kernel_symmetry():
    rng = np.random.default_rng(3)
    theta = make_theta(rng.uniform(0.1, 5.0, 4), sf2=1.7)
    for _ in range(10):
        a, b = rng.random(4), rng.random(4)
        assert kernel_se(a, b, theta) == pytest.approx(kernel_se(b, a, theta))


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_se([0.0, 1.0], [0.0], make_theta([1.0]))


# ---------------------------------------------------------------------------
# NLL
# ---------------------------------------------------------------------------

def test_nll_single_point_hand_value():
    theta = make_theta([1.0], sf2=1.0, se2=0.0)
    value = nll(np.array([[0.0]]), np.array([0.0]), theta)
    assert value == pytest.approx(0.5 * np.log(2.0 * np.pi), abs=1e-6)
    assert value == pytest.approx(0.918939, abs=1e-5)


def test_nll_zero_targets_drop_data_term():
    x, _, theta = random_problem(11, n=6)
    y0 = np.zeros(6)
    k = dense_kernel(x, x, theta) + (theta.se2 + JITTER_START) * np.eye(6)
    expected = 0.5 * 6 * np.log(2 * np.pi) + 0.5 * np.linalg.slogdet(k)[1]
    assert nll(x, y0, theta) == pytest.approx(expected, abs=1e-8)


def test_nll_matches_dense_inverse():
    for seed in (1, 2, 3):
        x, y, theta = random_problem(seed, n=5)
        k = dense_kernel(x, x, theta) + (theta.se2 + JITTER_START) * np.eye(5)
        direct = (
            0.5 * 5 * np.log(2 * np.pi)
            + 0.5 * np.linalg.slogdet(k)[1]
            + 0.5 * y @ np.linalg.inv(k) @ y
        )
        assert nll(x, y, theta) == pytest.approx(direct, abs=1e-8)


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.random((12, 3))
    y = rng.standard_normal(12)
    for ard in (True, False):
        n_par = (3 if ard else 1) + 2
        vec = rng.uniform(-1.0, 1.0, n_par)
        _, grad = _nll_and_grad(vec, x, y, 3, ard)
        h = 1e-6
        for m in range(n_par):
            vp, vm = vec.copy(), vec.copy()
            vp[m] += h
            vm[m] -= h
            fd = (
                _nll_and_grad(vp, x, y, 3, ard)[0]
                - _nll_and_grad(vm, x, y, 3, ard)[0]
            ) / (2 * h)
            assert grad[m] == pytest.approx(fd, abs=1e-4, rel=1e-4)


def test_chol_jitter_escalation():
    # slightly indefinite: escalation rescues it
    k = np.eye(3)
    k[0, 0] = -1e-6
    chol, jitter = _chol_with_jitter(k)
    assert jitter > 1e-6
    # hopeless after max escalation
    with pytest.raises(IllConditionedError):
        _chol_with_jitter(np.diag([1.0, -1.0]))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def test_fit_recovers_generated_data():
    rng = np.random.default_rng(17)
    x = rng.random((30, 2))
    true_theta = make_theta([25.0, 4.0], sf2=1.0, se2=0.01)
    k = dense_kernel(x, x, true_theta) + true_theta.se2 * np.eye(30)
    y = cholesky(k + 1e-12 * np.eye(30), lower=True) @ rng.standard_normal(30)
    model = fit(x, y, ard=True)
    fitted_nll = nll(x, y - np.mean(y), model.theta)
    generating_nll = nll(x, y - np.mean(y), true_theta)
    assert fitted_nll <= generating_nll + 1e-6


def test_fit_duplicate_conflicting_rows_force_noise():
    rng = np.random.default_rng(23)
    x = rng.random((10, 2))
    y = rng.standard_normal(10)
    x[7] = x[3]
    y[7] = y[3] + 1.0
    model = fit(x, y)
    assert model.theta.se2 > 1e-3


def test_fit_deterministic():
    rng = np.random.default_rng(29)
    x = rng.random((15, 3))
    y = np.sin(3 * x[:, 0]) + 0.1 * rng.standard_normal(15)
    m1 = fit(x, y)
    m2 = fit(x, y)
    assert np.array_equal(m1.theta.log_w, m2.theta.log_w)
    assert m1.theta.log_sf2 == m2.theta.log_sf2
    assert m1.theta.log_se2 == m2.theta.log_se2


def test_fit_warm_start_never_worse():
    rng = np.random.default_rng(31)
    x = rng.random((12, 2))
    y = rng.standard_normal(12)
    theta0 = make_theta([2.0, 2.0], sf2=1.0, se2=0.1)
    model = fit(x, y, warm_start=theta0)
    yc = y - np.mean(y)
    assert nll(x, yc, model.theta) <= nll(x, yc, theta0) + 1e-9


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        fit(np.zeros((4, 2)), np.zeros(3))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def test_predict_exact_interpolation():
    # sf2 well below 1 keeps the jitter-floor variance clear of rounding
    rng = np.random.default_rng(5)
    x = np.array([[0.1, 0.1], [0.5, 0.9], [0.9, 0.2], [0.3, 0.6]])
    y = rng.standard_normal(4)
    model = build_model(x, y, make_theta([30.0, 30.0], sf2=0.1, se2=0.0))
    for xi, yi in zip(x, y):
        mu, var = predict(model, xi)
        assert mu == pytest.approx(yi, abs=1e-6)
        assert var <= 1e-8


def test_predict_prior_reversion_far_away():
    x = np.array([[0.4, 0.4], [0.6, 0.6]])
    y = np.array([3.0, 5.0])
    model = build_model(x, y, make_theta([100.0, 100.0], sf2=0.7, se2=0.0))
    mu, var = predict(model, np.array([-30.0, 40.0]))
    assert mu == pytest.approx(4.0, abs=1e-3)  # the stored mean offset
    assert var == pytest.approx(0.7, abs=1e-3)


def test_predict_matches_dense_inverse():
    rng = np.random.default_rng(41)
    for seed in (1, 2, 3):
        x, y, theta = random_problem(seed, n=5)
        model = build_model(x, y, theta)
        k = dense_kernel(x, x, theta) + (theta.se2 + model.jitter) * np.eye(5)
        k_inv = np.linalg.inv(k)
        yc = y - np.mean(y)
        for _ in range(4):
            xs = rng.random(2)
            ks = dense_kernel([xs], x, theta)[0]
            mu_direct = ks @ k_inv @ yc + np.mean(y)
            var_direct = theta.sf2 - ks @ k_inv @ ks
            mu, var = predict(model, xs)
            assert mu == pytest.approx(mu_direct, abs=1e-8)
            assert var == pytest.approx(max(var_direct, 0.0), abs=1e-8)


def test_predict_batch_matches_single():
    x, y, theta = random_problem(13, n=6)
    model = build_model(x, y, theta)
    pts = np.random.default_rng(14).random((5, 2))
    mus, vars_ = predict(model, pts)
    for i, p in enumerate(pts):
        mu, var = predict(model, p)
        # batch and single paths may use different BLAS kernels
        assert mus[i] == pytest.approx(mu, rel=1e-12)
        assert vars_[i] == pytest.approx(var, rel=1e-12, abs=1e-15)


def test_predict_variance_bounds():
    rng = np.random.default_rng(43)
    for seed in (7, 8, 9):
        x, y, theta = random_problem(seed, n=8, se2=0.0)
        model = build_model(x, y, theta)
        for _ in range(10):
            xs = rng.random(2)
            # raw variance before clamping, recomputed densely
            k = dense_kernel(x, x, theta) + model.jitter * np.eye(8)
            ks = dense_kernel([xs], x, theta)[0]
            raw = theta.sf2 - ks @ np.linalg.inv(k) @ ks
            assert raw >= -1e-12
            _, var = predict(model, xs)
            assert 0.0 <= var <= theta.sf2 + 1e-9


def test_predict_monotone_information():
    rng = np.random.default_rng(47)
    theta = make_theta([8.0, 8.0], sf2=1.0, se2=0.01)
    x = rng.random((9, 2))
    y = rng.standard_normal(9)
    base = build_model(x[:8], y[:8], theta)
    grown = build_model(x, y, theta)
    for _ in range(10):
        xs = rng.random(2)
        assert predict(grown, xs)[1] <= predict(base, xs)[1] + 1e-9


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def test_predict_gradient_finite_differences():
    rng = np.random.default_rng(53)
    for seed in (1, 2):
        x, y, theta = random_problem(seed, n=7, d=3)
        model = build_model(x, y, theta)
        for _ in range(3):
            xs = rng.random(3)
            grad_mu, grad_sigma = predict_gradient(model, xs)
            h = 1e-6
            for d in range(3):
                xp, xm = xs.copy(), xs.copy()
                xp[d] += h
                xm[d] -= h
                mu_p, var_p = predict(model, xp)
                mu_m, var_m = predict(model, xm)
                fd_mu = (mu_p - mu_m) / (2 * h)
                fd_sigma = (np.sqrt(var_p) - np.sqrt(var_m)) / (2 * h)
                assert abs(grad_mu[d] - fd_mu) < 1e-5
                assert abs(grad_sigma[d] - fd_sigma) < 1e-5


def test_predict_gradient_symmetry():
    # configuration mirror-symmetric about x0 = 0.5; at a point on the
    # mirror plane the mean gradient has no component across it
    x = np.array([[0.3, 0.5], [0.7, 0.5], [0.5, 0.2], [0.5, 0.8]])
    y = np.array([2.0, 2.0, 1.0, 1.0])
    model = build_model(x, y, make_theta([10.0, 10.0], sf2=1.0, se2=0.0))
    grad_mu, _ = predict_gradient(model, np.array([0.5, 0.5]))
    assert abs(grad_mu[0]) < 1e-10


def test_predict_gradient_constant_targets():
    x = np.array([[0.2, 0.3], [0.8, 0.5], [0.4, 0.9]])
    y = np.array([1.5, 1.5, 1.5])
    model = build_model(x, y, make_theta([5.0, 5.0], sf2=1.0, se2=0.0))
    grad_mu, _ = predict_gradient(model, np.array([0.6, 0.4]))
    assert np.max(np.abs(grad_mu)) < 1e-8


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(59)
    x = rng.random((10, 3))
    y = rng.standard_normal(10)
    model = fit(x, y)
    path = tmp_path / "model.txt"
    save_model(model, path)
    back = load_model(path)
    for _ in range(10):
        xs = rng.random(3)
        mu1, var1 = predict(model, xs)
        mu2, var2 = predict(back, xs)
        assert mu2 == pytest.approx(mu1, abs=1e-12)
        assert var2 == pytest.approx(var1, abs=1e-12)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        load_model(path)
