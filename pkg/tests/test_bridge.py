import numpy as np
import pytest

from bridgekit.bridge import (BridgeState, DimensionError, SingularConversionError, noise_mean_from_posterior,
                              noise_mean_to_score, reverse_sde_drift, sample_zt, score_to_noise_mean,
                              score_to_velocity, velocity_target)
from bridgekit.schedule import Schedule


def test_sample_zt_returns_the_noise_it_used(linear):
    eps = np.array([[0.3, -1.0]])
    zt, used = sample_zt(np.ones((1, 2)), np.zeros((1, 2)), 0.5, linear, eps)
    assert used is eps or np.array_equal(used, eps)
    assert np.allclose(zt, 0.5 + 0.05 * eps)


def test_sample_zt_per_sample_times(linear):
    z0 = np.ones((3, 2))
    zt, _ = sample_zt(z0, np.zeros((3, 2)), np.array([0.0, 0.5, 1.0]), linear, np.zeros((3, 2)))
    assert np.allclose(zt[:, 0], [1.0, 0.5, 0.0])


def test_dimension_mismatch_raises(linear):
    with pytest.raises(DimensionError):
        sample_zt(np.zeros(2), np.zeros(3), 0.5, linear, np.zeros(2))
    with pytest.raises(DimensionError):
        BridgeState(np.zeros(2), 0.5, np.zeros(3))


def test_velocity_target_is_time_derivative_of_interpolant(linear):
    rng = np.random.default_rng(0)
    z0, zT, eps = rng.standard_normal((3, 5, 2))
    t, h = 0.37, 1e-6
    up, _ = sample_zt(z0, zT, t + h, linear, eps)
    down, _ = sample_zt(z0, zT, t - h, linear, eps)
    assert np.allclose((up - down) / (2 * h), velocity_target(z0, zT, t, linear, eps), atol=1e-7)


def test_tweedie_conversions_are_inverse(linear):
    s = np.array([0.4, -2.0])
    assert np.allclose(noise_mean_to_score(score_to_noise_mean(s, 0.3, linear), 0.3, linear), s)


def test_score_conversion_singular_at_endpoints(linear):
    with pytest.raises(SingularConversionError):
        score_to_noise_mean(np.ones(2), 0.0, linear)
    with pytest.raises(SingularConversionError):
        score_to_velocity(np.ones(2), np.ones(2), 1.0, linear, score=np.ones(2))


def test_score_to_velocity_needs_exactly_one_noise_input(linear):
    with pytest.raises(ValueError):
        score_to_velocity(np.ones(2), np.ones(2), 0.5, linear)
    with pytest.raises(ValueError):
        score_to_velocity(np.ones(2), np.ones(2), 0.5, linear, noise_mean=np.ones(2), score=np.ones(2))


def test_noise_mean_from_posterior_inverts_the_interpolant(linear):
    z0_hat, zT, u = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([0.2, 0.3])
    z, _ = sample_zt(z0_hat, zT, 0.4, linear, u)
    assert np.allclose(noise_mean_from_posterior(z, z0_hat, zT, 0.4, linear), u)


def test_noise_mean_from_posterior_is_zero_without_noise():
    rect = Schedule.rectified()
    assert np.all(noise_mean_from_posterior(np.ones(2), np.zeros(2), np.zeros(2), 0.4, rect) == 0)


def test_reverse_sde_drift_zero_g_is_velocity():
    v = np.array([1.0, 2.0])
    assert np.array_equal(reverse_sde_drift(v, None, 0.0), v)
    assert np.allclose(reverse_sde_drift(v, np.ones(2), 0.5), v - 0.5)
    with pytest.raises(ValueError):
        reverse_sde_drift(v, v, -0.1)


def test_forward_draws_match_kernel_law(linear):
    rng = np.random.default_rng(11)
    n = 100_000
    z0, zT = np.array([1.0, -0.5]), np.array([0.3, 2.0])
    zt, _ = sample_zt(np.broadcast_to(z0, (n, 2)), np.broadcast_to(zT, (n, 2)), 0.3, linear,
                      rng.standard_normal((n, 2)))
    a, b, g = linear.eval(0.3)
    se = g / np.sqrt(n)
    assert np.all(np.abs(zt.mean(0) - (a * z0 + b * zT)) <= 4 * se)
    cov = np.cov(zt, rowvar=False)
    assert np.all(np.abs(np.diag(cov) - g * g) <= 4 * g * g * np.sqrt(2 / n))
    assert abs(cov[0, 1]) <= 4 * g * g / np.sqrt(n)
