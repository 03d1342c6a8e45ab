"""Paired toy domains sharing a latent ``y``, with exact and perturbed encoders."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .oracle import GaussianDomain, OracleField
from .sampler import SamplerConfig, translate
from .schedule import Schedule


def rotation(angle: float, dim: int = 2) -> np.ndarray:
    """Rotation by ``angle`` in the first coordinate plane (identity in 1D)."""
    r = np.eye(dim)
    if dim >= 2:
        c, s = np.cos(angle), np.sin(angle)
        r[:2, :2] = [[c, -s], [s, c]]
    return r


class AffineMap:
    """``D(y) = R diag(scale) y + shift``."""

    def __init__(self, dim, angle=0.0, scale=1.0, shift=0.0):
        self.dim = int(dim)
        self.angle = float(angle)
        self.scale = np.broadcast_to(np.asarray(scale, dtype=float), (self.dim,)).copy()
        self.shift = np.broadcast_to(np.asarray(shift, dtype=float), (self.dim,)).copy()
        if np.any(self.scale == 0):
            raise ValueError("scales must be nonzero for the map to be invertible")
        self.matrix = rotation(self.angle, self.dim) @ np.diag(self.scale)
        self.inverse_matrix = np.linalg.inv(self.matrix)

    def forward(self, y):
        return np.asarray(y, dtype=float) @ self.matrix.T + self.shift

    def inverse(self, x):
        return (np.asarray(x, dtype=float) - self.shift) @ self.inverse_matrix.T

    def jacobian(self, y):
        return np.broadcast_to(self.matrix, np.shape(y)[:-1] + self.matrix.shape)

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    @property
    def inverse_lipschitz(self) -> float:
        return float(np.linalg.norm(self.inverse_matrix, 2))

    def to_dict(self):
        return {"type": "affine", "angle": self.angle, "scale": self.scale.tolist(),
                "shift": self.shift.tolist()}


class WarpedAffineMap(AffineMap):
    """``D(y) = w(A y + c)`` with the coordinatewise warp ``w(u) = u + k tanh(u)``, ``|k| < 1``.

    The warp slope lies between ``1`` and ``1 + k``, so both the map and its
    inverse stay Lipschitz.
    """

    def __init__(self, dim, angle=0.0, scale=1.0, shift=0.0, warp=0.3):
        super().__init__(dim, angle, scale, shift)
        if not -1.0 < warp < 1.0:
            raise ValueError("warp strength must lie in (-1, 1)")
        self.warp = float(warp)

    def forward(self, y):
        u = super().forward(y)
        return u + self.warp * np.tanh(u)

    def _unwarp(self, x):
        u = np.array(x, dtype=float)
        for _ in range(60):
            th = np.tanh(u)
            step = (u + self.warp * th - x) / (1.0 + self.warp * (1.0 - th * th))
            u = u - step
            if np.max(np.abs(step), initial=0.0) < 1e-15:
                break
        return u

    def inverse(self, x):
        return super().inverse(self._unwarp(np.asarray(x, dtype=float)))

    def jacobian(self, y):
        u = super().forward(y)
        slope = 1.0 + self.warp * (1.0 - np.tanh(u) ** 2)
        return slope[..., :, None] * self.matrix

    @property
    def lipschitz(self) -> float:
        return super().lipschitz * max(1.0, 1.0 + self.warp)

    @property
    def inverse_lipschitz(self) -> float:
        return super().inverse_lipschitz / min(1.0, 1.0 + self.warp)

    def to_dict(self):
        return {**super().to_dict(), "type": "warped", "warp": self.warp}


def map_from_dict(dim, d: dict):
    kind = d.get("type", "affine")
    args = dict(angle=d.get("angle", 0.0), scale=d.get("scale", 1.0), shift=d.get("shift", 0.0))
    if kind == "affine":
        return AffineMap(dim, **args)
    if kind == "warped":
        return WarpedAffineMap(dim, warp=d.get("warp", 0.3), **args)
    raise ValueError(f"unknown map type {kind!r}")


class Prior(str, enum.Enum):
    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"


@dataclass
class ToyWorld:
    dim: int
    map1: AffineMap
    map2: AffineMap
    prior: Prior = Prior.GAUSSIAN
    prior_scale: float = 1.0
    mixture_offset: float = 2.0
    noise1: float = 0.0
    noise2: float = 0.0

    def __post_init__(self):
        self.prior = Prior(self.prior)
        if self.map1.dim != self.dim or self.map2.dim != self.dim:
            raise ValueError("map dimensions must match the latent dimension")
        if self.noise1 < 0 or self.noise2 < 0 or self.prior_scale <= 0:
            raise ValueError("noise scales must be nonnegative and the prior scale positive")

    def maps(self, index: int):
        if index == 1:
            return self.map1
        if index == 2:
            return self.map2
        raise ValueError("domain index must be 1 or 2")

    def noise(self, index: int) -> float:
        return self.noise1 if index == 1 else self.noise2

    def mixture_centers(self):
        c = np.zeros((2, self.dim))
        c[0, 0], c[1, 0] = self.mixture_offset, -self.mixture_offset
        return c

    def sample_latent(self, rng, n):
        y = self.prior_scale * rng.standard_normal((n, self.dim))
        if self.prior is Prior.MIXTURE:
            y = y + self.mixture_centers()[rng.integers(0, 2, size=n)]
        return y

    def target_domain(self, index: int = 2) -> GaussianDomain:
        """Law of ``x_index`` given the shared latent used as the pinned endpoint."""
        m = self.maps(index)
        return GaussianDomain(mean=np.zeros(self.dim), covariance=self.noise(index) ** 2,
                              mean_map=m.forward)

    def oracle_field(self, schedule: Schedule, index: int = 2) -> OracleField:
        return OracleField(self.target_domain(index), schedule)

    def to_dict(self):
        return {"dim": self.dim, "map1": self.map1.to_dict(), "map2": self.map2.to_dict(),
                "prior": self.prior.value, "prior_scale": self.prior_scale,
                "mixture_offset": self.mixture_offset, "noise1": self.noise1, "noise2": self.noise2}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorld":
        dim = int(d["dim"])
        known = {"dim", "map1", "map2", "prior", "prior_scale", "mixture_offset", "noise1", "noise2"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown world fields: {unknown}")
        return cls(dim, map_from_dict(dim, d.get("map1", {})), map_from_dict(dim, d.get("map2", {})),
                   prior=d.get("prior", "gaussian"), prior_scale=float(d.get("prior_scale", 1.0)),
                   mixture_offset=float(d.get("mixture_offset", 2.0)),
                   noise1=float(d.get("noise1", 0.0)), noise2=float(d.get("noise2", 0.0)))


@dataclass
class PairSample:
    y: np.ndarray
    x1: np.ndarray
    x2: np.ndarray


def sample_pair(world: ToyWorld, n: int, seed: int) -> PairSample:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    y = world.sample_latent(rng, n)
    x1 = world.map1.forward(y) + world.noise1 * rng.standard_normal(y.shape)
    x2 = world.map2.forward(y) + world.noise2 * rng.standard_normal(y.shape)
    return PairSample(y, x1, x2)


class EncoderMode(str, enum.Enum):
    ORACLE = "oracle"
    PERTURBED = "perturbed"


@dataclass(frozen=True)
class EncoderHandle:
    mode: EncoderMode = EncoderMode.ORACLE
    delta_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", EncoderMode(self.mode))
        if self.delta_scale < 0:
            raise ValueError("delta_scale must be nonnegative")


def unit_directions(rng, n, dim):
    u = rng.standard_normal((n, dim))
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        u[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(u, axis=1, keepdims=True)
    return u / norms


def encode(handle: EncoderHandle, world: ToyWorld, x, index: int, rng=None):
    """Inverse domain map, plus an exact-norm random offset in perturbed mode."""
    x = np.asarray(x, dtype=float)
    y = world.maps(index).inverse(x)
    if handle.mode is EncoderMode.ORACLE or handle.delta_scale == 0.0:
        return y
    if rng is None:
        raise ValueError("perturbed encoding needs a noise source")
    yb = np.atleast_2d(y)
    out = yb + handle.delta_scale * unit_directions(rng, yb.shape[0], yb.shape[1])
    return out.reshape(y.shape)


class IdentityDecoder:
    lipschitz = 1.0
    error_bound = 0.0

    def __call__(self, z):
        return np.asarray(z, dtype=float)

    def to_dict(self):
        return {"type": "identity"}


class TanhDecoder:
    """``D(z) = z + c tanh(z)``: Lipschitz ``1 + |c|``; differs from identity by at most ``|c| sqrt(d)``."""

    def __init__(self, strength: float = 0.1):
        self.strength = float(strength)

    @property
    def lipschitz(self) -> float:
        return 1.0 + abs(self.strength)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return z + self.strength * np.tanh(z)

    def to_dict(self):
        return {"type": "tanh", "strength": self.strength}


def decoder_from_dict(d: Optional[dict]):
    if not d or d.get("type", "identity") == "identity":
        return IdentityDecoder()
    if d["type"] == "tanh":
        return TanhDecoder(float(d.get("strength", 0.1)))
    raise ValueError(f"unknown decoder type {d['type']!r}")


@dataclass
class PipelineResult:
    x_hat: np.ndarray
    x_true: np.ndarray
    y_hat: np.ndarray
    errors: np.ndarray


def translate_pipeline(world: ToyWorld, target_field, handle: EncoderHandle, pairs: PairSample,
                       cfg: SamplerConfig, decoder=None, rng=None, source_index: int = 1,
                       target_index: int = 2, source_field=None) -> PipelineResult:
    """Encode the source observations, run the sampler from the shared endpoint and decode.

    The paired generator supplies the true target observations for error measurement.
    """
    decoder = decoder or IdentityDecoder()
    x_src = pairs.x1 if source_index == 1 else pairs.x2
    x_true = pairs.x2 if target_index == 2 else pairs.x1
    y_hat = encode(handle, world, x_src, source_index, rng)
    out = translate(source_field, target_field, y_hat, cfg, record_every=cfg.n_steps)
    x_hat = decoder(out.final)
    errors = np.linalg.norm(np.atleast_2d(x_hat - x_true), axis=1)
    return PipelineResult(x_hat, x_true, y_hat, errors)
