from __future__ import annotations

import numpy as np
import pytest

from pds import Volume3, build_schedule
from pds.schedule import forward_marginal, forward_step, reverse_step


def test_build_rejects_bad_parameters():
    with pytest.raises(ValueError):
        build_schedule(0)
    with pytest.raises(ValueError):
        build_schedule(10, beta_start=0.0)
    with pytest.raises(ValueError):
        build_schedule(10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        build_schedule(10, beta_start=0.1, beta_end=1.0)
    with pytest.raises(ValueError):
        build_schedule(10, sigma_rule="nope")


def test_constant_beta_alpha_bar_oracle():
    # beta = 0.1 for all three steps -> alpha_bar = 0.9, 0.81, 0.729
    s = build_schedule(3, beta_start=0.1, beta_end=0.1)
    assert np.allclose(s.alpha_bar, [0.9, 0.81, 0.729], atol=1e-12)
    assert np.allclose(s.gamma, np.sqrt([0.1, 0.19, 0.271]), atol=1e-12)


def test_single_step_schedule():
    s = build_schedule(1, beta_start=0.25, beta_end=0.25)
    assert s.T == 1
    assert s.alpha_bar_at(1) == pytest.approx(0.75, abs=1e-15)
    assert s.alpha_bar_prev(1) == 1.0
    assert s.gamma_at(1) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("T", [1, 3, 50, 1000])
def test_schedule_algebra_invariants(T):
    s = build_schedule(T)
    # recompute the cumulative product independently
    prod = 1.0
    for t in range(1, T + 1):
        prod *= 1.0 - s.beta_at(t)
        assert abs(s.alpha_bar_at(t) - prod) < 1e-12
        assert abs(s.alpha_at(t) - (1.0 - s.beta_at(t))) < 1e-15
        assert abs(s.gamma_at(t) ** 2 + s.alpha_bar_at(t) - 1.0) < 1e-12
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar < 1)
    if T > 1:
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all(np.diff(s.beta) > 0)


def test_default_desk_schedule_final_noise_level():
    s = build_schedule(50)
    assert s.gamma_at(50) > 0.5


def test_t_range_is_checked():
    s = build_schedule(4)
    for bad in (0, 5, -1):
        with pytest.raises(ValueError):
            s.beta_at(bad)
    x = np.zeros(3)
    with pytest.raises(ValueError):
        forward_marginal(x, 5, x, s)


def test_forward_step_oracle():
    # x_prev = 0, eps = 1, beta = 0.25 -> x_t = sqrt(0.25) = 0.5
    s = build_schedule(1, beta_start=0.25, beta_end=0.25)
    out = forward_step(np.zeros(4), 1, np.ones(4), s)
    assert np.array_equal(out, np.full(4, 0.5))


def test_forward_step_tiny_beta_is_near_identity():
    s = build_schedule(1, beta_start=1e-12, beta_end=1e-12)
    x = np.linspace(-1, 1, 5)
    out = forward_step(x, 1, np.ones(5), s)
    assert np.allclose(out, x, atol=1e-5)


def test_forward_marginal_oracles():
    s = build_schedule(1, beta_start=0.25, beta_end=0.25)
    x0 = np.full(3, 0.8)
    # eps = 0 -> sqrt(alpha_bar) * x0
    out = forward_marginal(x0, 1, np.zeros(3), s)
    assert np.allclose(out, np.sqrt(0.75) * 0.8, atol=1e-15)
    # x0 = 0, eps = 1 -> gamma = 0.5
    out = forward_marginal(np.zeros(3), 1, np.ones(3), s)
    assert np.array_equal(out, np.full(3, 0.5))


def test_reverse_step_worked_example():
    # T = 2, constant beta 0.1, t = 2: alpha = 0.9, alpha_bar = 0.81.
    # x0 = 1, eps = 1 -> x_t = 0.9 + sqrt(0.19) = 1.33589...
    s = build_schedule(2, beta_start=0.1, beta_end=0.1)
    x_t = np.array([0.9 + np.sqrt(0.19)])
    assert x_t[0] == pytest.approx(1.33589, abs=1e-5)
    out = reverse_step(x_t, np.ones(1), 2, np.zeros(1), s)
    expect = (x_t[0] - 0.1 / np.sqrt(0.19)) / np.sqrt(0.9)
    assert abs(out[0] - expect) < 1e-12
    assert out[0] == pytest.approx(1.16632, abs=1e-5)


def test_reverse_step_zero_estimate_rescales():
    s = build_schedule(5)
    x = np.linspace(-1, 1, 7)
    out = reverse_step(x, np.zeros(7), 3, np.zeros(7), s)
    assert np.allclose(out, x / np.sqrt(s.alpha_at(3)), atol=1e-12)


@pytest.mark.parametrize("T", [1, 3, 50])
def test_exact_noise_single_step_identity(T):
    # With the exact noise and no injected z, one reverse step from the
    # marginal lands on sqrt(abar_prev) x0 + sqrt(alpha_t) (1 - abar_prev)
    # / sqrt(1 - abar_t) * eps; at t = 1 that is x0 itself.
    s = build_schedule(T)
    rng = np.random.default_rng(9)
    for t in (1, (T + 1) // 2, T):
        x0 = rng.uniform(0, 1, size=(4, 4))
        eps = rng.standard_normal((4, 4))
        x_t = forward_marginal(x0, t, eps, s)
        out = reverse_step(x_t, eps, t, np.zeros((4, 4)), s)
        prev = s.alpha_bar_prev(t)
        expect = (np.sqrt(prev) * x0
                  + np.sqrt(s.alpha_at(t)) * (1.0 - prev) / s.gamma_at(t) * eps)
        assert np.abs(out - expect).max() < 1e-10
        if t == 1:
            assert np.abs(out - x0).max() < 1e-10


def test_sigma_rules():
    sq = build_schedule(4, sigma_rule="sqrt_beta")
    assert np.allclose(sq.sigma, np.sqrt(sq.beta), atol=1e-15)
    po = build_schedule(4, sigma_rule="posterior")
    # t = 1: alpha_bar_prev = 1 -> zero posterior variance
    assert po.sigma_at(1) == 0.0
    for t in range(2, 5):
        prev = po.alpha_bar_at(t - 1)
        expect = np.sqrt((1 - prev) / (1 - po.alpha_bar_at(t)) * po.beta_at(t))
        assert abs(po.sigma_at(t) - expect) < 1e-15
        assert po.sigma_at(t) <= sq.sigma_at(t) + 1e-15


def test_steps_stay_finite_for_large_inputs():
    s = build_schedule(50)
    x = np.array([-10.0, 10.0])
    e = np.array([10.0, -10.0])
    for t in (1, 25, 50):
        assert np.isfinite(forward_step(x, t, e, s)).all()
        assert np.isfinite(forward_marginal(x, t, e, s)).all()
        assert np.isfinite(reverse_step(x, e, t, e, s)).all()


def test_volume_wrappers_round_trip():
    s = build_schedule(3)
    v = Volume3((2, 2, 2), (1, 1, 1), np.full((2, 2, 2), 0.5))
    eps = np.ones((2, 2, 2))
    out = forward_marginal(v, 2, eps, s)
    assert isinstance(out, Volume3)
    assert out.spacing == v.spacing
    back = reverse_step(out, eps, 2, np.zeros((2, 2, 2)), s)
    assert isinstance(back, Volume3)


def test_shape_mismatch_is_rejected():
    s = build_schedule(3)
    with pytest.raises(ValueError):
        forward_marginal(np.zeros((2, 2)), 1, np.zeros((3, 2)), s)
    with pytest.raises(ValueError):
        reverse_step(np.zeros(3), np.zeros(3), 1, np.zeros(4), s)
