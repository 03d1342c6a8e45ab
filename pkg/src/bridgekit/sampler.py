"""Reverse-time Euler integrators, PF-ODE inversion, guidance gating and drift mixing."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Union

import numpy as np

from .bridge import reverse_sde_drift
from .fields import as_field
from .schedule import EPS


class NonFiniteStateError(FloatingPointError):
    pass


class MissingScoreError(ValueError):
    pass


@dataclass
class SamplerConfig:
    """Integration settings.

    The uniform grid runs from ``min(t_start, 1 - eps)`` down to ``eps``;
    ``eps=0`` integrates over the closed unit interval. ``finalize`` controls
    the last hop from ``eps`` to 0: ``"auto"`` uses the field's posterior mean
    when it has one and an Euler step otherwise, ``"euler"`` always steps,
    ``"none"`` stops at ``eps``.
    """

    n_steps: int = 256
    eps: float = EPS
    t_start: float = 1.0
    guidance: float = 1.0
    cfg_window: tuple = (0.0, 1.0)
    t_end: float = 1.0
    g: Union[float, Callable] = 0.0
    seed: int = 0
    finalize: str = "auto"
    chunk: int = 8192

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be at least 1")
        self.n_steps = int(self.n_steps)
        if not 0.0 <= self.eps < 0.5:
            raise ValueError("eps must lie in [0, 0.5)")
        if not 0.0 <= self.t_end <= 1.0:
            raise ValueError("t_end must lie in [0, 1]")
        if not callable(self.g) and self.g < 0:
            raise ValueError("g must be nonnegative")
        if self.guidance < 0:
            raise ValueError("guidance scale must be nonnegative")
        if self.finalize not in ("auto", "euler", "none"):
            raise ValueError(f"unknown finalize mode {self.finalize!r}")
        self.cfg_window = tuple(float(x) for x in self.cfg_window)
        if self.t_hi <= self.eps:
            raise ValueError("t_start must exceed eps")

    @property
    def t_hi(self) -> float:
        return min(float(self.t_start), 1.0 - self.eps)

    @property
    def step(self) -> float:
        return (self.t_hi - self.eps) / self.n_steps

    def grid(self) -> np.ndarray:
        """Strictly decreasing uniform grid of ``n_steps + 1`` times."""
        return np.linspace(self.t_hi, self.eps, self.n_steps + 1)

    def g_at(self, t) -> float:
        g = float(self.g(t)) if callable(self.g) else float(self.g)
        if g < 0:
            raise ValueError(f"g({t}) is negative")
        return g

    def to_dict(self) -> dict:
        if callable(self.g):
            raise TypeError("a callable g cannot be serialized")
        return {
            "n_steps": self.n_steps, "eps": float(self.eps), "t_start": float(self.t_start),
            "guidance": float(self.guidance), "cfg_window": list(self.cfg_window),
            "t_end": float(self.t_end), "g": float(self.g), "seed": int(self.seed),
            "finalize": self.finalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown sampler fields: {unknown}")
        return cls(**known)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    zT: np.ndarray
    drifts: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class Translation:
    final: np.ndarray
    target: Trajectory
    source: Optional[Trajectory] = None
    mixed: Optional[Trajectory] = None


def mixing_weight(t, t_end):
    """``eta_t = (1 - t)`` while ``t > t_end``, zero afterwards."""
    return (1.0 - t) * float(t > t_end)


def mix_drifts(d_target, d_source, t, t_end):
    eta = mixing_weight(t, t_end)
    if eta == 0.0:
        return d_target
    return d_target + eta * (d_source - d_target)


def cfg_active(t, s, window) -> bool:
    return s > 1 and window[0] <= t <= window[1]


def guided_velocity(field, t, z, zT, condition, s, window):
    """Classifier-free guidance, gated on the scale and the time window.

    The unconditional branch is the same field with the condition zeroed.
    """
    v_cond = field.evaluate(t, z, zT, condition).velocity
    if condition is None or not cfg_active(t, s, window):
        return v_cond
    v_uncond = field.evaluate(t, z, zT, np.zeros_like(condition)).velocity
    return v_uncond + s * (v_cond - v_uncond)


def _check(z, k):
    if not np.all(np.isfinite(z)):
        raise NonFiniteStateError(f"non-finite state after step {k}")


class _Recorder:
    def __init__(self, every, keep_drifts):
        self.every = max(1, int(every))
        self.keep_drifts = keep_drifts
        self.times, self.states, self.drifts = [], [], []

    def add(self, k, t, z, last=False):
        if k % self.every == 0 or last:
            self.times.append(t)
            self.states.append(np.array(z, copy=True))

    def add_drift(self, d):
        if self.keep_drifts:
            self.drifts.append(np.array(d, copy=True))

    def build(self, zT):
        drifts = np.stack(self.drifts) if self.keep_drifts and self.drifts else None
        return Trajectory(np.array(self.times), np.stack(self.states), np.asarray(zT), drifts)


def _finalize(field, z, zT, t_lo, cfg, drift_fn):
    if cfg.finalize == "none" or t_lo == 0.0:
        return None
    if cfg.finalize == "auto" and not cfg_active(t_lo, cfg.guidance, cfg.cfg_window):
        out = field.evaluate(t_lo, z, zT)
        if out.posterior_mean is not None:
            return np.asarray(out.posterior_mean, dtype=float)
    return z - t_lo * drift_fn(t_lo, z)


def reverse_ode(field, zT, cfg: SamplerConfig, z_start=None, condition=None,
                record_every: int = 1, keep_drifts: bool = False) -> Trajectory:
    """Euler integration of the PF-ODE from the top of the grid down to 0.

    ``zT`` is the pinned endpoint the field is conditioned on; the state starts
    there unless ``z_start`` is given (inversion round trips, interior starts).
    """
    field = as_field(field)
    zT = np.asarray(zT, dtype=float)
    z = np.array(zT if z_start is None else z_start, dtype=float)
    times = cfg.grid()

    def drift(t, state):
        return guided_velocity(field, t, state, zT, condition, cfg.guidance, cfg.cfg_window)

    rec = _Recorder(record_every, keep_drifts)
    rec.add(0, times[0], z)
    for k in range(cfg.n_steps):
        t = times[k]
        d = drift(t, z)
        rec.add_drift(d)
        z = z + (times[k + 1] - t) * d
        _check(z, k)
        rec.add(k + 1, times[k + 1], z, last=(k + 1 == cfg.n_steps))
    z_final = _finalize(field, z, zT, times[-1], cfg, drift)
    if z_final is not None:
        _check(z_final, cfg.n_steps)
        rec.add(0, 0.0, z_final)
    return rec.build(zT)


def trajectory_noise(seed: int, first_index: int, n: int, n_steps: int, dim: int) -> np.ndarray:
    """Unit Gaussian increments of shape (n_steps, n, dim).

    Trajectory ``i`` always draws from its own stream seeded by ``(seed, i)``,
    so results do not depend on batching or ordering.
    """
    out = np.empty((n_steps, n, dim))
    for j in range(n):
        rng = np.random.default_rng([int(seed), int(first_index + j)])
        out[:, j, :] = rng.standard_normal((n_steps, dim))
    return out


def reverse_sde(field, zT, cfg: SamplerConfig, z_start=None, record_every: int = 1,
                first_index: int = 0) -> Trajectory:
    """Euler-Maruyama on drift ``v - g s`` with diffusion ``sqrt(2 g)``.

    A batch of shape (n, d) is integrated as n trajectories with indices
    ``first_index .. first_index + n - 1``; a single vector uses index
    ``first_index``.
    """
    field = as_field(field)
    if not getattr(field, "has_score", False):
        raise MissingScoreError("the reverse SDE needs a field that provides a score")
    zT = np.asarray(zT, dtype=float)
    z0 = np.array(zT if z_start is None else z_start, dtype=float)
    single = z0.ndim == 1
    batch = z0[None, :] if single else z0
    zT_b = zT[None, :] if (single and zT.ndim == 1) else zT
    n, dim = batch.shape

    parts = []
    for lo in range(0, n, cfg.chunk):
        hi = min(n, lo + cfg.chunk)
        zT_c = zT_b if zT_b.ndim == 1 or zT_b.shape[0] == 1 else zT_b[lo:hi]
        parts.append(_sde_chunk(field, zT_c, batch[lo:hi], cfg, record_every, first_index + lo))
    times = parts[0][0]
    states = np.concatenate([p[1] for p in parts], axis=1)
    if single:
        states = states[:, 0, :]
    return Trajectory(times, states, zT)


def _sde_chunk(field, zT, z, cfg, record_every, first_index):
    times = cfg.grid()
    n, dim = z.shape
    any_noise = callable(cfg.g) or cfg.g > 0
    noise = trajectory_noise(cfg.seed, first_index, n, cfg.n_steps, dim) if any_noise else None
    rec = _Recorder(record_every, False)
    rec.add(0, times[0], z)

    def ode_drift(t, state):
        return field.evaluate(t, state, zT).velocity

    for k in range(cfg.n_steps):
        t = times[k]
        dt = times[k + 1] - t
        g = cfg.g_at(t)
        if g == 0.0:
            z = z + dt * ode_drift(t, z)
        else:
            out = field.evaluate(t, z, zT)
            z = z + dt * reverse_sde_drift(out.velocity, out.score, g) + np.sqrt(2.0 * g * abs(dt)) * noise[k]
        _check(z, k)
        rec.add(k + 1, times[k + 1], z, last=(k + 1 == cfg.n_steps))
    z_final = _finalize(field, z, zT, times[-1], cfg, ode_drift)
    if z_final is not None:
        rec.add(0, 0.0, z_final)
    return np.array(rec.times), np.stack(rec.states)


def invert(field, z0, cfg: SamplerConfig, zT=None, condition=None) -> np.ndarray:
    """Forward Euler of the same PF-ODE from 0 to the top of the grid.

    ``zT`` is the endpoint the field is conditioned on (zeros when omitted).
    The hop from 0 to ``eps`` uses the field at ``eps`` so ``t=0`` is never
    evaluated; it is skipped with ``finalize="none"``. The result is the state
    at the top of the grid.
    """
    field = as_field(field)
    z = np.array(z0, dtype=float)
    zT = np.zeros_like(z) if zT is None else np.asarray(zT, dtype=float)
    times = cfg.grid()[::-1]

    def drift(t, state):
        return guided_velocity(field, t, state, zT, condition, cfg.guidance, cfg.cfg_window)

    if times[0] > 0.0 and cfg.finalize != "none":
        z = z + times[0] * drift(times[0], z)
    for k in range(cfg.n_steps):
        t = times[k]
        z = z + (times[k + 1] - t) * drift(t, z)
        _check(z, k)
    return z


def translate(source_field, target_field, zT, cfg: SamplerConfig, condition=None,
              record_every: int = 1) -> Translation:
    """Shared-endpoint translation with optional source/target drift mixing.

    Three states start at ``zT``: the target-only path, the source path and the
    mixed path, each advanced with its own drift. The mixed increment combines
    the target and source drifts evaluated on their own paths.
    """
    target_field = as_field(target_field)
    zT = np.asarray(zT, dtype=float)
    if source_field is None or cfg.t_end >= 1.0:
        traj = reverse_ode(target_field, zT, cfg, condition=condition, record_every=record_every)
        return Translation(final=traj.final, target=traj)
    source_field = as_field(source_field)
    times = cfg.grid()

    def d_target(t, state):
        return guided_velocity(target_field, t, state, zT, condition, cfg.guidance, cfg.cfg_window)

    def d_source(t, state):
        return source_field.evaluate(t, state, zT).velocity

    z_i = zT.copy()
    z_j = zT.copy()
    z_mix = zT.copy()
    recs = [_Recorder(record_every, False) for _ in range(3)]
    for rec, z in zip(recs, (z_i, z_j, z_mix)):
        rec.add(0, times[0], z)
    for k in range(cfg.n_steps):
        t = times[k]
        dt = times[k + 1] - t
        di = d_target(t, z_i)
        dj = d_source(t, z_j)
        if di.shape != dj.shape:
            raise ValueError(f"source and target drifts disagree in shape: {dj.shape} vs {di.shape}")
        z_mix = z_mix + dt * mix_drifts(di, dj, t, cfg.t_end)
        z_i = z_i + dt * di
        z_j = z_j + dt * dj
        last = k + 1 == cfg.n_steps
        for rec, z in zip(recs, (z_i, z_j, z_mix)):
            _check(z, k)
            rec.add(k + 1, times[k + 1], z, last=last)
    t_lo = times[-1]
    if cfg.finalize != "none" and t_lo > 0.0:
        # the mixed path has no single posterior mean, so every path takes the Euler hop
        di, dj = d_target(t_lo, z_i), d_source(t_lo, z_j)
        z_mix = z_mix - t_lo * mix_drifts(di, dj, t_lo, cfg.t_end)
        z_i = z_i - t_lo * di
        z_j = z_j - t_lo * dj
        for rec, z in zip(recs, (z_i, z_j, z_mix)):
            rec.add(0, 0.0, z)
    target, source, mixed = (rec.build(zT) for rec in recs)
    return Translation(final=mixed.final, target=target, source=source, mixed=mixed)
