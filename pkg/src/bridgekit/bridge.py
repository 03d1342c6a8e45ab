"""Forward interpolant sampling, regression targets and score/velocity conversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .schedule import Schedule


class DimensionError(ValueError):
    pass


class SingularConversionError(ZeroDivisionError):
    """A raw score cannot be converted where gamma_t vanishes."""


@dataclass(frozen=True)
class BridgeState:
    z: np.ndarray
    t: float
    z_T: np.ndarray

    def __post_init__(self):
        if np.shape(self.z)[-1:] != np.shape(self.z_T)[-1:]:
            raise DimensionError("z and z_T must share the latent dimension")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")


@dataclass
class FieldOutput:
    velocity: np.ndarray
    score: Optional[np.ndarray] = None
    posterior_mean: Optional[np.ndarray] = None
    noise_mean: Optional[np.ndarray] = None


def _time_column(t, like):
    """Broadcast per-sample times of shape (n,) against batched vectors (n, d)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (np.ndim(like) - t.ndim))


def _check_dims(*arrays):
    dims = {np.shape(a)[-1] for a in arrays if a is not None}
    if len(dims) > 1:
        raise DimensionError(f"latent dimensions disagree: {sorted(dims)}")


def sample_zt(z0, zT, t, schedule: Schedule, noise):
    """Draw from the pinned-endpoint kernel using caller-supplied unit noise.

    Returns ``(z_t, eps_used)``; the noise is handed back so regression
    targets are built from the same draw.
    """
    z0, zT, noise = (np.asarray(a, dtype=float) for a in (z0, zT, noise))
    _check_dims(z0, zT, noise)
    alpha, beta, gamma = (_time_column(c, z0) for c in schedule.eval(t))
    zt = alpha * z0 + beta * zT + gamma * noise
    return zt, noise


def velocity_target(z0, zT, t, schedule: Schedule, eps):
    """Regression target ``d/dt I(t, z0, zT) + gamma_dot * eps``."""
    z0, zT, eps = (np.asarray(a, dtype=float) for a in (z0, zT, eps))
    _check_dims(z0, zT, eps)
    a_dot, b_dot, g_dot = (_time_column(c, z0) for c in schedule.eval_derivatives(t))
    return a_dot * z0 + b_dot * zT + g_dot * eps


def score_to_noise_mean(score, t, schedule: Schedule):
    """Tweedie: ``E[eps | z_t, z_T] = -gamma_t * score``."""
    score = np.asarray(score, dtype=float)
    _, _, gamma = schedule.eval(t)
    gamma = _time_column(gamma, score)
    if np.any(np.asarray(gamma) <= 0.0):
        raise SingularConversionError(f"gamma_t vanishes at t={t!r}; raw score is not convertible")
    return -gamma * score


def noise_mean_to_score(noise_mean, t, schedule: Schedule):
    noise_mean = np.asarray(noise_mean, dtype=float)
    _, _, gamma = schedule.eval(t)
    gamma = _time_column(gamma, noise_mean)
    if np.any(np.asarray(gamma) <= 0.0):
        raise SingularConversionError(f"gamma_t vanishes at t={t!r}; score is undefined")
    return -noise_mean / gamma


def noise_mean_from_posterior(z, posterior_mean, zT, t, schedule: Schedule):
    """Recover ``E[eps | z_t, z_T]`` from the posterior mean of ``z_0``.

    Conditional expectation of the interpolant gives
    ``z = alpha * z0_hat + beta * zT + gamma * u_hat``.
    """
    alpha, beta, gamma = (_time_column(c, z) for c in schedule.eval(t))
    if np.any(np.asarray(gamma) <= 0.0):
        return np.zeros_like(np.asarray(z, dtype=float))
    return (np.asarray(z) - alpha * posterior_mean - beta * np.asarray(zT)) / gamma


def score_to_velocity(posterior_mean, zT, t, schedule: Schedule, noise_mean=None, score=None):
    """Velocity ``alpha_dot * z0_hat + beta_dot * zT + gamma_dot * u_hat``.

    Pass either ``noise_mean`` or a raw ``score``; the latter is converted to
    a noise mean first and fails where gamma_t is zero.
    """
    if (noise_mean is None) == (score is None):
        raise ValueError("give exactly one of noise_mean or score")
    if noise_mean is None:
        noise_mean = score_to_noise_mean(score, t, schedule)
    posterior_mean = np.asarray(posterior_mean, dtype=float)
    noise_mean = np.asarray(noise_mean, dtype=float)
    zT = np.asarray(zT, dtype=float)
    _check_dims(posterior_mean, noise_mean, zT)
    a_dot, b_dot, g_dot = (_time_column(c, posterior_mean) for c in schedule.eval_derivatives(t))
    return a_dot * posterior_mean + b_dot * zT + g_dot * noise_mean


def reverse_sde_drift(velocity, score, g):
    """Drift ``v - g * s`` of the marginal-preserving reverse SDE (diffusion ``sqrt(2 g)``)."""
    if np.any(np.asarray(g) < 0):
        raise ValueError(f"diffusion coefficient must be nonnegative, got {g!r}")
    velocity = np.asarray(velocity, dtype=float)
    if np.all(np.asarray(g) == 0):
        return velocity.copy()
    return velocity - g * np.asarray(score, dtype=float)
