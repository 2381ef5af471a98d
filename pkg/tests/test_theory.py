import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afno.baseline import FnoConfig, FnoParams
from afno.tensor import ContractError
from afno.theory import (accumulated_error_ratio, check_prop1, check_prop2, directional_lipschitz,
                         estimate_lipschitz, estimate_propagation_gain, fit_growth)
from synthetic_models import exact_codec


def power_iteration_sigma(a, iters=2000):
    """Largest singular value of ``a`` from power iteration on ``a^T a``."""
    v = np.ones(a.shape[1])
    for _ in range(iters):
        v = a.T @ (a @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(a @ v))


def probes(n=4, size=6, seed=0):
    return list(np.random.default_rng(seed).normal(size=(n, size)))


# -- Lipschitz estimates -------------------------------------------------------------

def test_identity_and_scaling_maps():
    assert estimate_lipschitz(lambda u: u, probes()) == 1.0
    assert estimate_lipschitz(lambda u: 2 * u, probes()) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ContractError):
        estimate_lipschitz(lambda u: u, probes(), scale=0.0)


def test_degenerate_pairs_are_skipped():
    # a perturbation far below the probe's spacing rounds away; no pair survives
    assert estimate_lipschitz(lambda u: 3 * u, [np.full(4, 1e20)], scale=1e-3) == 0.0


def test_random_linear_map_against_power_iteration():
    a = np.random.default_rng(1).normal(size=(4, 4))
    sigma = power_iteration_sigma(a)
    est = estimate_lipschitz(lambda u: a @ u, probes(size=4), n_pairs=1000, seed=2)
    assert est <= sigma * (1 + 1e-12)
    assert est >= 0.9 * sigma


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(0, 10_000))
def test_composition_with_scaled_rotation(c, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    g = rng.normal(size=(5, 5))
    ps = probes(size=5, seed=seed)
    lf = estimate_lipschitz(lambda u: c * (q @ u), ps, seed=seed)
    lg = estimate_lipschitz(lambda u: g @ u, ps, seed=seed)
    lfg = estimate_lipschitz(lambda u: c * (q @ (g @ u)), ps, seed=seed)
    assert lfg <= lf * lg + 1e-6


def test_directional_estimate_on_linear_map():
    a = np.diag([3.0, 1.0])
    assert directional_lipschitz(lambda u: a @ u, np.ones(2), np.array([1e-3, 0])) == pytest.approx(3.0)
    assert directional_lipschitz(lambda u: a @ u, np.ones(2), np.zeros(2)) == 0.0


# -- growth fits ------------------------------------------------------------------------

def test_linear_curve():
    fit = fit_growth(3.0 * np.arange(1, 41))
    assert fit.label == "linear"
    assert fit.linear_r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.linear_slope == pytest.approx(3.0, rel=1e-12)


def test_exponential_curve():
    n = np.arange(1, 41)
    fit = fit_growth(2 * 1.1 ** n)
    assert fit.label == "exponential"
    assert fit.exp_r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.exp_rate == pytest.approx(math.log(1.1), rel=1e-10)


def test_noisy_exponential_rate():
    n = np.arange(1, 101)
    rng = np.random.default_rng(7)
    curve = 0.01 * np.exp(0.08 * n) * (1 + 0.1 * rng.normal(size=n.size))
    fit = fit_growth(curve)
    assert fit.label == "exponential"
    assert abs(fit.exp_rate - 0.08) < 0.1 * 0.08


@pytest.mark.parametrize("dt_l", [0.01, 0.005, 0.001])
def test_euler_amplification_rate_matches_continuous(dt_l):
    n = np.arange(1, 201)
    fit = fit_growth((1 + dt_l) ** n)
    assert fit.exp_rate == pytest.approx(math.log1p(dt_l), rel=1e-10)
    assert fit.exp_rate == pytest.approx(dt_l, rel=0.01)


def test_growth_needs_enough_positive_points():
    with pytest.raises(ContractError):
        fit_growth(np.arange(1, 12), skip=5)
    curve = np.concatenate([np.arange(1.0, 31.0), np.zeros(5)])
    assert fit_growth(curve).n_points == 30


# -- bound checks --------------------------------------------------------------------

def test_prop1_first_step_slack_is_exact_for_nonlinear_map():
    frames = np.random.default_rng(0).normal(size=(12, 8))
    rep = check_prop1(lambda u: np.tanh(1.5 * u) + 0.1, frames)
    assert rep.slack[0] == 0.0
    assert 0.0 <= rep.violation_fraction <= 1.0


def test_prop1_linear_system_exact_data():
    u0 = np.random.default_rng(1).normal(size=8)
    frames = np.stack([2.0 ** n * u0 for n in range(12)])
    rep = check_prop1(lambda u: 2 * u, frames)
    assert np.all(rep.slack == 0) and rep.violation_fraction == 0
    rep = check_prop1(lambda u: 2 * u, frames, lipschitz=2.0)
    assert np.all(rep.slack == 0)


def test_prop1_linear_system_model_error():
    # the map overestimates growth; with a linear map the directional constant is exact
    u0 = 1e-3 * np.random.default_rng(2).normal(size=8)
    frames = np.stack([1.9 ** n * u0 for n in range(15)])
    rep = check_prop1(lambda u: 2 * u, frames)
    assert np.all(rep.slack >= -1e-10)
    assert rep.violation_fraction == 0
    np.testing.assert_allclose(rep.constants["lipschitz"][1:], 2.0, rtol=1e-10)


def test_prop1_accepts_fno_checkpoint():
    p = FnoParams.create(FnoConfig(width=4, modes=2, n_layers=1, proj_hidden=3), seed=0)
    frames = np.random.default_rng(3).normal(size=(5, 1, 8))
    rep = check_prop1(p, frames)
    assert rep.slack.shape == (4,) and rep.slack[0] == 0.0


@pytest.mark.parametrize("model_rate", [-0.8, -0.5])
def test_prop2_scalar_latent_system(model_rate):
    dt, true_rate = 0.1, -0.8
    p = exact_codec(model_rate)
    u0 = np.random.default_rng(4).normal(size=(1, 16))
    frames = np.stack([(1 + dt * true_rate) ** n * u0 for n in range(20)])
    rep = check_prop2(p, frames, 0.01, dt)
    assert rep.slack[0] == 0.0
    assert np.all(rep.slack >= -1e-10) and rep.violation_fraction == 0
    assert np.all(rep.physical_slack >= -1e-10) and rep.physical_violation_fraction == 0
    if model_rate == true_rate:
        assert np.all(np.abs(rep.slack) < 1e-12) and np.all(rep.constants["eps_z"] < 1e-12)
    else:
        np.testing.assert_allclose(rep.constants["lipschitz_v"][1:], abs(model_rate), rtol=1e-8)


def test_prop2_rejects_autoregressive_model():
    p = exact_codec(-0.5)
    p.hyper.autoregressive = True
    with pytest.raises(ContractError):
        check_prop2(p, np.ones((3, 1, 8)), 0.01, 0.1)


# -- accumulated error ratio -------------------------------------------------------------

def test_ratio_closed_form():
    k = np.arange(1, 51, dtype=float)
    res = accumulated_error_ratio(k, np.ones_like(k))
    np.testing.assert_allclose(res.ratio, (k + 1) / 2, rtol=1e-14)
    assert res.slope == pytest.approx(0.5, rel=1e-12)


def test_ratio_equal_curves_and_sentinel():
    curve = np.random.default_rng(5).uniform(0.1, 1, 30)
    res = accumulated_error_ratio(curve, curve)
    np.testing.assert_allclose(res.ratio, 1.0, rtol=1e-14)
    assert abs(res.slope) < 1e-12
    res = accumulated_error_ratio(curve, np.zeros(30))
    assert np.all(np.isnan(res.ratio)) and math.isnan(res.slope)


# -- propagation gain ---------------------------------------------------------------------

def test_gain_is_zero_for_exact_zero_dynamics():
    p = exact_codec(0.0)
    trajs = [np.full((101, 1, 8), c) for c in (0.3, -1.2)]
    gain = estimate_propagation_gain(p, trajs, 0.01, 0.1)
    assert gain.eta < 1e-12
    assert np.all(gain.contributions == 0)
    assert all(v == 0 for per_w in gain.kappa.values() for v in per_w.values())
    assert all(v == 0 for v in gain.pooled.values())


def test_gain_contractive_latent_map_closed_form():
    # model factor a, data factor b: D_i = (a^i - b^i)|u0| and the largest one-step error is (a - b)|u0|
    dt, a, b = 0.1, 0.3, 0.2
    p = exact_codec((a - 1) / dt)
    u0 = np.random.default_rng(6).normal(size=(1, 16))
    frames = np.stack([b ** n * u0 for n in range(101)])
    eta = (a - b) * np.linalg.norm(u0)
    gain = estimate_propagation_gain(p, [frames], 0.01, dt, eta=eta)
    i = np.arange(1, 101)
    d = (a ** i - b ** i) * np.linalg.norm(u0)
    for w, per_k in gain.kappa.items():
        for k, value in per_k.items():
            expected = d[:k].sum() / (k * w * eta)
            assert value == pytest.approx(expected, rel=1e-6)
            assert value < 1


def test_gain_rejects_short_trajectories():
    with pytest.raises(ContractError):
        estimate_propagation_gain(exact_codec(0.0), [np.ones((50, 1, 8))], 0.01, 0.1)
