"""Interpolant weight schedules.

A schedule gives the weights of the linear-Gaussian interpolant

    z_t = alpha_t * z_0 + beta_t * z_T + gamma_t * eps

on the unit horizon, together with their analytic time derivatives.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

#: Endpoint clip used for derivative evaluation, training times and sampler grids.
EPS = 1e-3


class ScheduleDomainError(ValueError):
    """Raised when a schedule is evaluated outside the unit horizon."""


class Kind(str, enum.Enum):
    LINEAR = "linear"
    SNR = "snr"
    RECTIFIED = "rectified"


@dataclass(frozen=True)
class Schedule:
    kind: Kind = Kind.LINEAR
    gamma_max: float = 0.1
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.gamma_max < 0:
            raise ValueError(f"gamma_max must be nonnegative, got {self.gamma_max}")
        if self.beta_min <= 0 or self.beta_max <= 0:
            raise ValueError("beta_min and beta_max must be positive")

    @classmethod
    def linear(cls, gamma_max: float = 0.1) -> "Schedule":
        return cls(Kind.LINEAR, gamma_max=gamma_max)

    @classmethod
    def snr(cls, beta_min: float = 0.1, beta_max: float = 20.0) -> "Schedule":
        return cls(Kind.SNR, beta_min=beta_min, beta_max=beta_max)

    @classmethod
    def rectified(cls) -> "Schedule":
        return cls(Kind.RECTIFIED, gamma_max=0.0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.kind is Kind.LINEAR:
            d["gamma_max"] = float(self.gamma_max)
        elif self.kind is Kind.SNR:
            d["beta_min"] = float(self.beta_min)
            d["beta_max"] = float(self.beta_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        kind = Kind(d.get("kind", "linear"))
        if kind is Kind.LINEAR:
            return cls.linear(float(d.get("gamma_max", 0.1)))
        if kind is Kind.SNR:
            return cls.snr(float(d.get("beta_min", 0.1)), float(d.get("beta_max", 20.0)))
        return cls.rectified()

    # -- variance-preserving helpers for the SNR family ------------------

    def _noise_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def _noise_rate(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t

    def signal_noise(self, t):
        """Return ``(a_t, sigma_t)`` of the underlying VP diffusion (SNR family)."""
        t = _check_time(t)
        b = self._noise_integral(t)
        a = np.exp(-0.5 * b)
        sigma = np.sqrt(-np.expm1(-b))
        return a, sigma

    def snr_value(self, t):
        a, sigma = self.signal_noise(t)
        with np.errstate(divide="ignore"):
            return a * a / (sigma * sigma)

    def _inverse_snr(self, t):
        # 1/SNR_t = sigma_t^2 / a_t^2 = exp(B(t)) - 1
        return np.expm1(self._noise_integral(t))

    # -- public evaluation -------------------------------------------------

    def eval(self, t):
        """Return ``(alpha, beta, gamma)`` at time(s) ``t`` in [0, 1]."""
        t = _check_time(t)
        if self.kind is Kind.SNR:
            a, sigma = self.signal_noise(t)
            a_end, _ = self.signal_noise(1.0)
            r = self._inverse_snr(t) / self._inverse_snr(1.0)
            alpha = a * (1.0 - r)
            beta = a / a_end * r
            gamma = sigma * np.sqrt(np.clip(1.0 - r, 0.0, None))
            return alpha, beta, gamma
        alpha = 1.0 - t
        beta = t + 0.0 * t
        if self.kind is Kind.RECTIFIED:
            gamma = 0.0 * t
        else:
            gamma = self.gamma_max * np.sqrt(t * (1.0 - t))
        return alpha, beta, gamma

    def eval_derivatives(self, t):
        """Return ``(alpha_dot, beta_dot, gamma_dot)``.

        Times inside the endpoint clip zones are clamped to ``[EPS, 1 - EPS]``
        with a logged warning, since ``gamma_dot`` diverges at both ends.
        """
        t = _clamp_for_derivatives(_check_time(t))
        if self.kind is Kind.SNR:
            a, sigma = self.signal_noise(t)
            a_end, _ = self.signal_noise(1.0)
            q_end = self._inverse_snr(1.0)
            rate = self._noise_rate(t)
            r = self._inverse_snr(t) / q_end
            r_dot = rate * np.exp(self._noise_integral(t)) / q_end
            a_dot = -0.5 * rate * a
            alpha_dot = a_dot * (1.0 - r) - a * r_dot
            beta_dot = (a_dot * r + a * r_dot) / a_end
            gamma_sq = sigma * sigma * (1.0 - r)
            gamma_sq_dot = rate * a * a * (1.0 - r) - sigma * sigma * r_dot
            gamma_dot = gamma_sq_dot / (2.0 * np.sqrt(gamma_sq))
            return alpha_dot, beta_dot, gamma_dot
        alpha_dot = -1.0 + 0.0 * t
        beta_dot = 1.0 + 0.0 * t
        if self.kind is Kind.RECTIFIED:
            gamma_dot = 0.0 * t
        else:
            gamma_dot = self.gamma_max * (1.0 - 2.0 * t) / (2.0 * np.sqrt(t * (1.0 - t)))
        return alpha_dot, beta_dot, gamma_dot

    def table(self, n: int = 101):
        """Rows of ``(t, alpha, beta, gamma, alpha_dot, beta_dot, gamma_dot)`` on a uniform grid.

        Derivative columns use the clipped time, without warnings.
        """
        t = np.linspace(0.0, 1.0, n)
        alpha, beta, gamma = self.eval(t)
        tc = np.clip(t, EPS, 1.0 - EPS)
        d = self.eval_derivatives(tc)
        return np.column_stack([t, alpha, beta, gamma, *np.broadcast_arrays(*d)])


def _check_time(t):
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ScheduleDomainError(f"time must lie in [0, 1], got {t!r}")
    return arr if arr.ndim else float(arr)


def _clamp_for_derivatives(t):
    arr = np.asarray(t, dtype=float)
    clipped = np.clip(arr, EPS, 1.0 - EPS)
    if np.any(clipped != arr):
        logger.warning(
            "derivative requested inside endpoint clip zone; clamped %d time(s) to [%g, %g]",
            int(np.count_nonzero(clipped != arr)), EPS, 1.0 - EPS,
        )
    return clipped if clipped.ndim else float(clipped)
