"""Closed-form bridge fields for Gaussian domains.

For ``z_0 ~ N(mu, Sigma)`` (``mu`` may depend on the pinned endpoint) the
interpolant ``z_t = alpha z_0 + beta z_T + gamma eps`` is jointly Gaussian
with ``z_0`` and ``eps``, so all conditional means are linear solves against
``M = alpha^2 Sigma + gamma^2 I``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .bridge import FieldOutput, _time_column
from .schedule import Schedule

JITTER = 1e-10


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class GaussianDomain:
    """Gaussian law of ``z_0`` given the endpoint.

    ``covariance`` may be a scalar, a vector (diagonal fast path) or a full
    symmetric PSD matrix. ``mean_map``, when set, makes the mean a function of
    ``z_T`` (used for the paired toy worlds where ``z_0 = D(y) + noise``).
    """

    mean: np.ndarray
    covariance: np.ndarray
    mean_map: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        d = self.mean.shape[-1]
        if cov.ndim == 0:
            cov = np.full(d, float(cov))
        if cov.ndim == 1:
            if cov.shape != (d,) or np.any(cov < 0):
                raise ValueError("diagonal covariance must be nonnegative with the mean's dimension")
        elif cov.ndim == 2:
            if cov.shape != (d, d) or not np.allclose(cov, cov.T):
                raise ValueError("covariance must be a symmetric (d, d) matrix")
            if np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                raise ValueError("covariance must be positive semidefinite")
        else:
            raise ValueError("covariance must be scalar, vector or matrix")
        self.covariance = cov

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def diagonal(self) -> bool:
        return self.covariance.ndim == 1

    def mean_at(self, zT):
        if self.mean_map is None:
            return self.mean
        return np.asarray(self.mean_map(np.asarray(zT, dtype=float)), dtype=float)

    def marginal(self, t, zT, schedule: Schedule):
        """Mean and covariance (diagonal vector or matrix) of ``z_t | z_T``."""
        alpha, beta, gamma = schedule.eval(t)
        mean = alpha * self.mean_at(zT) + beta * np.asarray(zT, dtype=float)
        if self.diagonal:
            return mean, alpha**2 * self.covariance + gamma**2
        return mean, alpha**2 * self.covariance + gamma**2 * np.eye(self.dim)


def _solve(domain: GaussianDomain, alpha, gamma, w):
    """Return ``M^{-1} w`` for ``M = alpha^2 Sigma + gamma^2 I``."""
    if np.any((np.asarray(alpha) == 0) & (np.asarray(gamma) == 0)):
        raise SingularSystemError("alpha and gamma both vanish; the conditional system is singular")
    g2 = np.asarray(gamma) ** 2
    jitter = np.where(g2 < JITTER, JITTER, 0.0)
    if domain.diagonal:
        return w / (np.asarray(alpha) ** 2 * domain.covariance + g2 + jitter)
    if np.ndim(alpha):
        raise ValueError("per-sample times need a diagonal covariance")
    m = alpha**2 * domain.covariance + (g2 + jitter) * np.eye(domain.dim)
    factor = linalg.cho_factor(m, lower=True)
    flat = w.reshape(-1, domain.dim)
    return linalg.cho_solve(factor, flat.T).T.reshape(w.shape)


def _sigma_times(domain: GaussianDomain, x):
    if domain.diagonal:
        return domain.covariance * x
    return x @ domain.covariance.T


def posterior_mean(domain: GaussianDomain, zt, zT, t, schedule: Schedule):
    """``E[z_0 | z_t, z_T] = mu + alpha Sigma M^{-1} (z_t - alpha mu - beta z_T)``."""
    zt = np.asarray(zt, dtype=float)
    zT = np.asarray(zT, dtype=float)
    alpha, beta, gamma = (_time_column(c, zt) for c in schedule.eval(t))
    mu = domain.mean_at(zT)
    w = zt - alpha * mu - beta * zT
    return mu + alpha * _sigma_times(domain, _solve(domain, alpha, gamma, w))


def oracle_field(domain: GaussianDomain, zt, zT, t, schedule: Schedule) -> FieldOutput:
    zt = np.asarray(zt, dtype=float)
    zT = np.asarray(zT, dtype=float)
    alpha, beta, gamma = (_time_column(c, zt) for c in schedule.eval(t))
    a_dot, b_dot, g_dot = (_time_column(c, zt) for c in schedule.eval_derivatives(t))
    mu = domain.mean_at(zT)
    w = zt - alpha * mu - beta * zT
    m_inv_w = _solve(domain, alpha, gamma, w)
    sigma_m_inv_w = _sigma_times(domain, m_inv_w)
    z0_hat = mu + alpha * sigma_m_inv_w
    u_hat = gamma * m_inv_w
    # combined form of E[d/dt I + gamma_dot eps | z_t]; kept independent of score_to_velocity
    velocity = a_dot * mu + b_dot * zT + a_dot * alpha * sigma_m_inv_w + g_dot * gamma * m_inv_w
    gamma_arr = np.broadcast_to(gamma, np.shape(u_hat))
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(gamma_arr > 0, -u_hat / np.where(gamma_arr > 0, gamma_arr, 1.0), -m_inv_w)
    return FieldOutput(velocity=velocity, score=score, posterior_mean=z0_hat, noise_mean=u_hat)


class OracleField:
    """Exact conditional field with the same interface as trained models."""

    has_score = True

    def __init__(self, domain: GaussianDomain, schedule: Schedule):
        self.domain = domain
        self.schedule = schedule

    def evaluate(self, t, z, zT, condition=None) -> FieldOutput:
        return oracle_field(self.domain, z, zT, t, self.schedule)

    def __call__(self, t, z, zT, condition=None):
        return self.evaluate(t, z, zT).velocity
