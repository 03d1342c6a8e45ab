"""A small numpy velocity network trained by flow matching.

Architecture: ``[z, fourier(t), zT] -> tanh(128) -> tanh(128) -> dim(z)``. An
optional condition enters the first layer as ``cond_scale * Wc (mask * c)``
where ``cond_scale`` starts at zero, so an untrained net ignores the condition.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .bridge import (FieldOutput, noise_mean_from_posterior, noise_mean_to_score,
                     sample_zt, score_to_velocity, velocity_target)
from .io import load_tensors, save_tensors
from .sampler import guided_velocity
from .schedule import EPS, Kind, Schedule

logger = logging.getLogger(__name__)

N_FREQ = 4
PARAM_ORDER = ("W1", "b1", "Wc", "cond_scale", "W2", "b2", "W3", "b3")


class Parameterization(str, enum.Enum):
    VELOCITY = "velocity"
    POSTERIOR_MEAN = "posterior_mean"


class TrainingDivergedError(FloatingPointError):
    pass


def time_features(t, n):
    """Fourier features ``sin(k pi t), cos(k pi t)``, k = 1..4, shape (n, 8)."""
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (n,)) if np.ndim(t) == 0 else np.asarray(t, dtype=float)
    k = np.arange(1, N_FREQ + 1) * np.pi
    ang = t[:, None] * k[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityNet:
    def __init__(self, dim, schedule: Schedule, cond_dim=0, width=128,
                 parameterization=Parameterization.VELOCITY, seed=0):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.width = int(width)
        self.schedule = schedule
        self.parameterization = Parameterization(parameterization)
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0])
        n_in = 2 * self.dim + 2 * N_FREQ
        h = self.width

        def dense(fan_out, fan_in):
            return rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)

        self.params = {
            "W1": dense(h, n_in), "b1": np.zeros(h),
            "Wc": dense(h, max(self.cond_dim, 1))[:, : self.cond_dim],
            "cond_scale": np.zeros(()),
            "W2": dense(h, h), "b2": np.zeros(h),
            "W3": dense(self.dim, h) * 0.1, "b3": np.zeros(self.dim),
        }

    # -- serialization helpers -----------------------------------------

    def architecture(self) -> dict:
        return {
            "dim": self.dim, "cond_dim": self.cond_dim, "width": self.width,
            "parameterization": self.parameterization.value, "time_features": 2 * N_FREQ,
            "activation": "tanh",
        }

    @property
    def has_score(self) -> bool:
        return (self.parameterization is Parameterization.POSTERIOR_MEAN
                and self.schedule.kind is not Kind.RECTIFIED)

    # -- forward / backward --------------------------------------------

    def _inputs(self, t, z, zT):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        n = z.shape[0]
        zT = np.broadcast_to(np.asarray(zT, dtype=float), z.shape)
        return np.concatenate([z, time_features(t, n), zT], axis=1)

    def _cond_input(self, condition, n):
        if self.cond_dim == 0:
            return np.zeros((n, 0))
        if condition is None:
            return np.zeros((n, self.cond_dim))
        return np.broadcast_to(np.asarray(condition, dtype=float), (n, self.cond_dim))

    def forward(self, x, c, params=None, cache=False):
        p = self.params if params is None else params
        cond_embed = c @ p["Wc"].T
        a1 = x @ p["W1"].T + p["b1"] + p["cond_scale"] * cond_embed
        h1 = np.tanh(a1)
        h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
        out = h2 @ p["W3"].T + p["b3"]
        if cache:
            return out, (x, c, cond_embed, h1, h2)
        return out

    def backward(self, grad_out, saved, params=None):
        p = self.params if params is None else params
        x, c, cond_embed, h1, h2 = saved
        g = {"W3": grad_out.T @ h2, "b3": grad_out.sum(0)}
        d2 = (grad_out @ p["W3"]) * (1.0 - h2 * h2)
        g["W2"] = d2.T @ h1
        g["b2"] = d2.sum(0)
        d1 = (d2 @ p["W2"]) * (1.0 - h1 * h1)
        g["W1"] = d1.T @ x
        g["b1"] = d1.sum(0)
        g["cond_scale"] = np.asarray(np.sum(d1 * cond_embed))
        g["Wc"] = p["cond_scale"] * (d1.T @ c)
        return g

    def loss_and_grad(self, batch, params=None):
        """Mean squared regression loss (summed over dims) and its parameter gradients."""
        out, saved = self.forward(batch["x"], batch["c"], params, cache=True)
        resid = out - batch["target"]
        n = resid.shape[0]
        loss = float(np.sum(resid * resid) / n)
        return loss, self.backward(2.0 * resid / n, saved, params)

    def make_batch(self, t, z0, zT, eps, condition=None, keep=None):
        """Regression batch for the flow-matching objective.

        ``keep`` is the per-sample condition dropout mask (1 keeps the condition).
        """
        z0 = np.atleast_2d(z0)
        n = z0.shape[0]
        zt, eps = sample_zt(z0, zT, t, self.schedule, eps)
        if self.parameterization is Parameterization.VELOCITY:
            target = velocity_target(z0, zT, t, self.schedule, eps)
        else:
            target = np.array(z0, dtype=float)
        c = self._cond_input(condition, n)
        if keep is not None:
            c = c * np.asarray(keep, dtype=float).reshape(n, 1)
        return {"x": self._inputs(t, zt, zT), "c": np.ascontiguousarray(c), "target": target}

    # -- evaluation ------------------------------------------------------

    def raw(self, t, z, zT, condition=None):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        zb = np.atleast_2d(z)
        out = self.forward(self._inputs(t, zb, zT), self._cond_input(condition, zb.shape[0]))
        return out[0] if single else out

    def evaluate(self, t, z, zT, condition=None) -> FieldOutput:
        out = self.raw(t, z, zT, condition)
        if self.parameterization is Parameterization.VELOCITY:
            return FieldOutput(velocity=out)
        z = np.asarray(z, dtype=float)
        zT_b = np.broadcast_to(np.asarray(zT, dtype=float), z.shape)
        noise_mean = noise_mean_from_posterior(z, out, zT_b, t, self.schedule)
        velocity = score_to_velocity(out, zT_b, t, self.schedule, noise_mean=noise_mean)
        score = noise_mean_to_score(noise_mean, t, self.schedule) if self.has_score else None
        return FieldOutput(velocity=velocity, score=score, posterior_mean=out, noise_mean=noise_mean)

    def __call__(self, t, z, zT, condition=None):
        return self.evaluate(t, z, zT, condition).velocity


def eval_cfg(net, t, z, zT, condition, s, window):
    """Guided velocity: ``v_u + s (v_c - v_u)`` when ``s > 1`` and ``t`` is inside the window."""
    if s < 0:
        raise ValueError("guidance scale must be nonnegative")
    return guided_velocity(net, t, z, zT, condition, s, window)


@dataclass
class TrainConfig:
    batch: int = 256
    steps: int = 2000
    learn_rate: float = 1e-3
    cond_dropout: float = 0.2
    seed: int = 0
    t_clip: float = EPS
    betas: tuple = (0.9, 0.999)
    eval_every: int = 50
    val_size: int = 1024
    lr_decay: str = "cosine"
    ema: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")
        if self.lr_decay not in ("cosine", "none"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")
        if self.batch < 1 or self.steps < 0:
            raise ValueError("batch must be positive and steps nonnegative")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return {"batch": self.batch, "steps": self.steps, "learn_rate": self.learn_rate,
                "cond_dropout": self.cond_dropout, "seed": self.seed, "t_clip": self.t_clip,
                "betas": list(self.betas), "eval_every": self.eval_every, "val_size": self.val_size,
                "lr_decay": self.lr_decay, "ema": self.ema}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown training fields: {unknown}")
        return cls(**d)


@dataclass
class LossTrace:
    train: list = dc_field(default_factory=list)
    val_steps: list = dc_field(default_factory=list)
    val: list = dc_field(default_factory=list)

    def moving_average(self, window=100):
        x = np.asarray(self.train)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def _draw(domain_sampler, rng, n):
    out = domain_sampler(rng, n)
    z0, zT = np.atleast_2d(out[0]), np.atleast_2d(out[1])
    cond = out[2] if len(out) > 2 else None
    if z0.shape != zT.shape:
        raise ValueError(f"z0 and zT shapes differ: {z0.shape} vs {zT.shape}")
    return z0, zT, cond


def _random_batch(net, domain_sampler, rng, cfg, n):
    z0, zT, cond = _draw(domain_sampler, rng, n)
    t = rng.uniform(cfg.t_clip, 1.0 - cfg.t_clip, size=n)
    eps = rng.standard_normal(z0.shape)
    keep = (rng.uniform(size=n) >= cfg.cond_dropout).astype(float)
    return net.make_batch(t, z0, zT, eps, cond, keep)


def train(net: VelocityNet, domain_sampler: Callable, schedule: Schedule, cfg: TrainConfig,
          callback=None):
    """Adam on the flow-matching loss; returns ``(net, LossTrace)``.

    With ``cfg.ema > 0`` the validation loss is measured on, and the returned
    net carries, an exponential moving average of the weights whose decay
    ramps up as ``(1 + step) / (10 + step)`` until it reaches ``cfg.ema``.

    ``domain_sampler(rng, n)`` returns ``(z0, zT)`` or ``(z0, zT, condition)``.
    ``callback(step, params)`` runs after every step if given; ``params`` are
    the weights the run would return if it stopped there.
    """
    if schedule != net.schedule:
        raise ValueError("training schedule differs from the network's schedule")
    rng = np.random.default_rng([cfg.seed, 1])
    val_rng = np.random.default_rng([cfg.seed, 2])
    val_batch = _random_batch(net, domain_sampler, val_rng, cfg, cfg.val_size)
    m = {k: np.zeros_like(v) for k, v in net.params.items()}
    v = {k: np.zeros_like(v) for k, v in net.params.items()}
    b1, b2 = cfg.betas
    ema = {k: np.array(p, copy=True) for k, p in net.params.items()} if cfg.ema > 0 else None
    trace = LossTrace()
    for step in range(1, cfg.steps + 1):
        batch = _random_batch(net, domain_sampler, rng, cfg, cfg.batch)
        loss, grads = net.loss_and_grad(batch)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step} (learn_rate={cfg.learn_rate})")
        trace.train.append(loss)
        lr = cfg.learn_rate
        if cfg.lr_decay == "cosine":
            lr = 0.5 * lr * (1.0 + np.cos(np.pi * (step - 1) / cfg.steps))
        lr_t = lr * np.sqrt(1 - b2**step) / (1 - b1**step)
        # warm-up keeps short runs from being pinned to the initial weights
        decay = min(cfg.ema, (1.0 + step) / (10.0 + step))
        for k in PARAM_ORDER:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            net.params[k] = net.params[k] - lr_t * m[k] / (np.sqrt(v[k]) + 1e-8)
            if ema is not None:
                ema[k] = decay * ema[k] + (1 - decay) * net.params[k]
        if step % cfg.eval_every == 0 or step == cfg.steps:
            trace.val_steps.append(step)
            trace.val.append(net.loss_and_grad(val_batch, ema)[0])
        if callback is not None:
            callback(step, net.params if ema is None else ema)
    if ema is not None:
        net.params = ema
    return net, trace


def gradient_check(net: VelocityNet, batch, h=1e-5, params=None):
    """Max relative error per tensor between analytic and central-difference gradients."""
    params = {k: np.array(v, dtype=float) for k, v in (params or net.params).items()}
    _, grads = net.loss_and_grad(batch, params)
    report = {}
    for name in PARAM_ORDER:
        p = params[name]
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = net.loss_and_grad(batch, params)[0]
            flat[i] = old - h
            down = net.loss_and_grad(batch, params)[0]
            flat[i] = old
            fd_flat[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(grads[name]))
        report[name] = 0.0 if scale == 0 else float(np.linalg.norm(fd - grads[name]) / scale)
    return report


def save_checkpoint(net: VelocityNet, path):
    header = {"format": "bridgekit-velocity-net", "architecture": net.architecture(),
              "schedule": net.schedule.to_dict(), "seed": net.seed}
    save_tensors(path, header, {k: net.params[k] for k in PARAM_ORDER})


def load_checkpoint(path) -> VelocityNet:
    header, tensors = load_tensors(path)
    if header.get("format") != "bridgekit-velocity-net":
        raise ValueError(f"{path} is not a velocity-net checkpoint")
    arch = header["architecture"]
    net = VelocityNet(arch["dim"], Schedule.from_dict(header["schedule"]), cond_dim=arch["cond_dim"],
                      width=arch["width"], parameterization=arch["parameterization"], seed=header["seed"])
    for k in PARAM_ORDER:
        if tensors[k].shape != net.params[k].shape:
            raise ValueError(f"tensor {k} has shape {tensors[k].shape}, expected {net.params[k].shape}")
        net.params[k] = tensors[k]
    return net
