import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import batch_gp_posterior, se_cov, wv_cov
from synth import draw_battery
from sohgp.ssgp import kalman
from sohgp.ssgp.benchmark import fit_benchmark, random_walk_loglik
from sohgp.ssgp.inducing import choose_inducing_points
from sohgp.ssgp.kernels import se_kernel, wv_discretisation, wv_gram, wv_kernel
from sohgp.ssgp.model import (BatteryData, Energy, Hyperparameters, build_state_space, energy,
                              fit_map, log_half_normal, log_inv_gamma, log_prior, loglik_augmented,
                              loglik_full, smooth, time_steps)

HP = Hyperparameters(0.1, 0.3, 1.0, 1.0, 1.0)


def quiet_fit(data, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return fit_map(data, **kw)


# ---------------------------------------------------------------- kernels

def test_wv_spot_values():
    assert wv_kernel(1.0, 1.0, 1.0) == 1 / 3
    assert wv_kernel(1.0, 2.0, 1.0) == 5 / 6
    assert wv_kernel(2.0, 1.0, 1.0) == 5 / 6


@given(st.floats(0.0, 100.0), st.floats(0.01, 10.0))
def test_wv_anchored_at_zero(t, sigma):
    assert wv_kernel(0.0, t, sigma) == 0.0
    assert wv_kernel(t, 0.0, sigma) == 0.0


def test_wv_rejects_negative_time():
    with pytest.raises(ValueError):
        wv_kernel(-1.0, 1.0, 1.0)


def test_wv_matches_longhand_formula():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 3, 12)
    np.testing.assert_allclose(wv_gram(t, 0.4), wv_cov(t, t, 0.4), rtol=1e-13)


def test_se_examples():
    x = np.array([[0.3, -1.0, 2.0]])
    assert se_kernel(x, x, 0.7, np.ones(3))[0, 0] == pytest.approx(0.49, rel=1e-15)
    off = x + np.array([[0.0, 1.0, 0.0]])
    assert se_kernel(x, off, 1.0, np.ones(3))[0, 0] == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)


def test_se_symmetry_and_longhand():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    ell = np.array([0.5, 1.5, 2.0])
    np.testing.assert_allclose(se_kernel(a, b, 0.3, ell), se_kernel(b, a, 0.3, ell).T, rtol=1e-15)
    np.testing.assert_allclose(se_kernel(a, b, 0.3, ell), se_cov(a, b, 0.3, ell), rtol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**31 - 1))
def test_gram_matrices_psd(n, seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 5, n)
    K = wv_gram(t, 1.3)
    assert np.array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    x = rng.normal(size=(n, 3))
    S = se_kernel(x, x, 0.8, rng.uniform(0.2, 3.0, 3))
    assert np.allclose(S, S.T, rtol=0, atol=0)
    assert np.linalg.eigvalsh(S).min() >= -1e-8


def test_wv_discretisation_reproduces_gram():
    t = np.array([0.2, 0.5, 0.55, 1.3, 2.0])
    sigma = 0.7
    P = np.zeros((2, 2))
    prev = 0.0
    out = []
    for tk in t:
        A, Q = wv_discretisation(tk - prev, sigma)
        P = A @ P @ A.T + Q
        out.append(P[0, 0])
        prev = tk
    np.testing.assert_allclose(out, np.diag(wv_cov(t, t, sigma)), rtol=1e-12)
    # one-step cross covariance k(t_k, t_{k+1}) = [A P]_{00}
    A, _ = wv_discretisation(t[1] - t[0], sigma)
    P0 = np.array([[wv_kernel(t[0], t[0], sigma), sigma**2 * t[0]**2 / 2], [sigma**2 * t[0]**2 / 2, sigma**2 * t[0]]])
    assert (A @ P0)[0, 0] == pytest.approx(wv_kernel(t[0], t[1], sigma), rel=1e-12)


# ---------------------------------------------------------------- inducing points

def test_inducing_exact_twenty_points():
    pts = np.random.default_rng(2).normal(size=(20, 3))
    ind = choose_inducing_points(pts)
    assert not ind.fallback
    np.testing.assert_array_equal(np.unique(ind.points, axis=0), np.unique(pts, axis=0))


def test_inducing_two_clusters_recover_means():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(1000, 3)) * 0.1 + np.array([5.0, 0.0, 0.0])
    b = rng.normal(size=(1000, 3)) * 0.1 - np.array([5.0, 0.0, 0.0])
    ind = choose_inducing_points(np.vstack([a, b]), k=2)
    got = ind.points[np.argsort(ind.points[:, 0])]
    np.testing.assert_allclose(got, np.vstack([b.mean(0), a.mean(0)]), atol=1e-6)


def test_inducing_fallback_when_few_distinct():
    pts = np.repeat(np.random.default_rng(4).normal(size=(10, 3)), 5, axis=0)
    ind = choose_inducing_points(pts)
    assert ind.fallback and len(ind) == 10


def test_inducing_deterministic():
    pts = np.random.default_rng(5).normal(size=(500, 3))
    np.testing.assert_array_equal(choose_inducing_points(pts, seed=1).points,
                                  choose_inducing_points(pts, seed=1).points)


# ---------------------------------------------------------------- state space

def small_data(n=60, seed=0, current=None):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.01, 1.0, n))
    op = rng.normal(size=(n, 3))
    I = rng.uniform(0.5, 2.5, n) if current is None else np.asarray(current, dtype=float)
    y = I * (0.3 * t + 0.1 * op[:, 0]) + rng.normal(0, 0.05, n)
    return BatteryData("b", t, I, op, y, np.full(n, 0.0025), np.arange(n) // 10, float(t[-1]))


def test_interpolation_one_hot_on_inducing_points():
    U = np.random.default_rng(6).normal(size=(20, 3)) * 2
    model = build_state_space(HP, U)
    W, resid = model.interpolation(U)
    np.testing.assert_allclose(W, np.eye(20), atol=1e-6)
    assert np.all(resid < 1e-6)


def test_zero_current_is_a_no_op():
    data = small_data(n=5, current=np.zeros(5))
    model = build_state_space(HP, np.random.default_rng(7).normal(size=(4, 3)))
    H, r = model.observation(data)
    assert np.all(H == 0)
    ll, mf, Pf, ms, vs, rows = smooth(model, data)
    m0, P0 = model.prior()
    np.testing.assert_allclose(mf[-1], m0)
    np.testing.assert_allclose(Pf[-1][2:, 2:], P0[2:, 2:])


def test_no_observations_returns_prior():
    model = build_state_space(HP, np.zeros((1, 3)))
    m0, P0 = model.prior()
    ll, bad, ms, Ps = kalman.filter_store(np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0), 0.01,
                                          True, m0, P0)
    assert ll == 0.0 and bad == -1 and ms.shape == (0, 3)


def test_single_observation_conjugate_update():
    # scalar random walk: prior N(m0, p0), observation y = I R + e
    m0, p0, I, y, r = 0.4, 0.09, 2.0, 1.1, 0.01
    ll, mf, pf = kalman.random_walk_filter(np.zeros(1), np.array([I]), np.array([y]), np.array([r]),
                                           1.0, m0, p0)
    s = I * I * p0 + r
    assert mf[0] == pytest.approx(m0 + p0 * I * (y - I * m0) / s, rel=1e-14)
    assert pf[0] == pytest.approx(p0 - (p0 * I) ** 2 / s, rel=1e-14)
    assert ll == pytest.approx(-0.5 * (math.log(2 * math.pi * s) + (y - I * m0) ** 2 / s), rel=1e-14)


def test_augmented_loglik_equals_full_filter():
    data = small_data(n=120, seed=8)
    U = choose_inducing_points(data.op, k=8)
    for hp in (HP, Hyperparameters(0.5, 0.05, 0.3, 2.0, 5.0), Hyperparameters(2.0, 1.0, 3.0, 0.5, 1.0)):
        model = build_state_space(hp, U)
        assert loglik_augmented(model, data) == pytest.approx(loglik_full(model, data), rel=1e-9)


def test_static_block_matches_batch_posterior():
    rng = np.random.default_rng(9)
    n, m = 150, 20
    op = rng.normal(size=(n, 3))
    I = rng.uniform(0.3, 2.0, n)
    U = choose_inducing_points(op, k=m).points
    hp = Hyperparameters(0.1, 0.4, 0.8, 1.2, 1.0)
    model = build_state_space(hp, U)
    W, resid = model.interpolation(op)
    H = I[:, None] * W
    r = 0.01 + I * I * resid
    y = H @ (np.linalg.cholesky(model.Kuu) @ rng.normal(size=m)) + rng.normal(0, 0.1, n)
    mean, cov, ll = batch_gp_posterior(model.Kuu, H, y, r)
    m0 = np.zeros(m)
    ll_kf, bad, ms, Ps = kalman.filter_store(np.zeros(n), H, y, r, 0.0, False, m0, model.Kuu.copy())
    np.testing.assert_allclose(ms[-1], mean, rtol=1e-6, atol=1e-9 * np.abs(mean).max())
    np.testing.assert_allclose(Ps[-1], cov, rtol=1e-6, atol=1e-9 * np.abs(cov).max())
    assert ll_kf == pytest.approx(ll, rel=1e-9)


def test_rts_variance_not_above_filtered():
    data = small_data(n=200, seed=10)
    model = build_state_space(HP, choose_inducing_points(data.op, k=6))
    _, mf, Pf, ms, vs, rows = smooth(model, data)
    filt = np.einsum("kii->ki", Pf)
    assert np.all(vs <= filt + 1e-12)
    assert np.all(vs >= -1e-12)


def test_time_steps_reject_decreasing():
    with pytest.raises(ValueError):
        time_steps([0.1, 0.05])


# ---------------------------------------------------------------- priors and energy

def test_inverse_gamma_mode_at_one():
    grid = np.linspace(0.2, 3.0, 2801)
    vals = [log_inv_gamma(l) for l in grid]
    assert grid[int(np.argmax(vals))] == pytest.approx(1.0, abs=1e-3)
    base = [0.2, 0.2, 1.0, 1.0, 1.0]
    e1 = -log_prior(Hyperparameters(*base))
    for j in (2, 3, 4):
        for l in (0.8, 1.2):
            hp = list(base)
            hp[j] = l
            assert -log_prior(Hyperparameters(*hp)) > e1


def test_half_normal_difference():
    diff = log_half_normal(0.2, 0.2) - log_half_normal(0.4, 0.2)
    assert diff == pytest.approx((0.4**2 - 0.2**2) / (2 * 0.2**2), rel=1e-14)
    assert diff == pytest.approx(1.5, rel=1e-14)


def test_energy_empty_data_is_negative_log_prior():
    empty = BatteryData("e", np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                        np.zeros(0, dtype=int), 0.0)
    assert energy(HP, empty, np.zeros((3, 3)) + np.arange(3)[:, None]) == -log_prior(HP)


def test_energy_rejects_non_positive():
    with pytest.raises(ValueError):
        Hyperparameters(0.1, -0.3, 1, 1, 1)


def test_energy_cache_consistent_with_direct():
    data = small_data(n=80, seed=11)
    U = choose_inducing_points(data.op, k=5)
    E = Energy(data, U)
    for hp in (HP, Hyperparameters(0.3, 0.3, 1.0, 1.0, 1.0), HP):
        model = build_state_space(hp, U)
        assert E(hp) == pytest.approx(-loglik_full(model, data) - log_prior(hp), rel=1e-9)


# ---------------------------------------------------------------- MAP fit

def test_fit_map_descends_and_is_deterministic():
    data, _, _ = draw_battery(0, n=600)
    a = quiet_fit(data)
    b = quiet_fit(data)
    assert a.energy <= a.energy_initial
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_fit_map_recovers_hyperparameters():
    truth = np.array([0.1, 0.3, 1.0, 1.0, 1.0])
    fits = np.array([quiet_fit(draw_battery(seed)[0]).hp.as_array() for seed in range(20)])
    ratio = np.median(fits, axis=0) / truth
    assert np.all((ratio > 0.5) & (ratio < 2.0)), ratio


def test_fit_map_null_aging_velocity():
    data, _, _ = draw_battery(1, n=1000, aging=False)
    m = quiet_fit(data)
    v, var = m.smooth_mean[-1, 1], m.smooth_var[-1, 1]
    assert abs(v) <= 2 * math.sqrt(var)


def test_health_model_roundtrip():
    from sohgp.ssgp.model import HealthModel

    data, _, _ = draw_battery(2, n=300)
    m = quiet_fit(data)
    back = HealthModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.to_dict() == m.to_dict()


# ---------------------------------------------------------------- benchmark

def constant_r0_data(n=400, r0=0.6, noise=1e-4, seed=12):
    rng = np.random.default_rng(seed)
    t = np.linspace(0.01, 1.0, n)
    I = rng.uniform(0.5, 2.5, n)
    y = I * r0 + rng.normal(0, math.sqrt(noise), n)
    return BatteryData("c", t, I, np.zeros((n, 3)), y, np.full(n, noise), np.arange(n) // 20, 1.0)


def test_benchmark_constant_resistance():
    data = constant_r0_data()
    bm = fit_benchmark(data)
    assert bm.q < 1e-3
    assert np.all(np.abs(bm.filt_mean[2:] - 0.6) <= 3 * np.sqrt(bm.filt_var[2:]) + 1e-3)
    assert bm.initial_variance == pytest.approx(100 * bm.q)


def test_benchmark_single_observation_conjugate():
    one = BatteryData("s", np.array([0.5]), np.array([2.0]), np.zeros((1, 3)), np.array([1.3]),
                      np.array([0.02]), np.array([0]), 0.5)
    bm = fit_benchmark(one, multiplier=100.0, r_init=0.0)
    p0 = 100.0 * bm.q + bm.q * 0.5
    s = 4.0 * p0 + 0.02
    assert bm.filt_mean[0] == pytest.approx(p0 * 2.0 * 1.3 / s, rel=1e-9)
    assert bm.filt_var[0] == pytest.approx(p0 - (2.0 * p0) ** 2 / s, rel=1e-9)


def test_benchmark_no_observations_is_prior():
    ll, mf, pf = kalman.random_walk_filter(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), 0.1, 0.0, 10.0)
    assert ll == 0.0 and mf.shape == (0,)
    assert random_walk_loglik(0.1, constant_r0_data(n=1)) < 0
