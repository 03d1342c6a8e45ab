"""Endpoint construction: center-surround filtering, patch features, PCA and endpoint noise."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .io import pack_tensors, unpack_tensors


class ImageTooSmallError(ValueError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    pass


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma and renormalized to unit sum."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = int(np.ceil(4.0 * sigma))
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma):
    k = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(image, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


@dataclass(frozen=True)
class RetinaFilter:
    """Iterated difference of Gaussians with a widening surround.

    Iteration ``t`` (1-based) applies ``G_c * f - w_s G_s(t) * f`` with
    ``sigma_s(t) = sigma_c (1 + 2 t)``.
    """

    sigma_c: float = 1.0
    w_s: float = 1.0
    iterations: int = 2

    def __post_init__(self):
        if self.sigma_c <= 0 or self.iterations < 1:
            raise ValueError("sigma_c must be positive and iterations at least 1")

    def sigma_s(self, t: int) -> float:
        return self.sigma_c * (1.0 + 2.0 * t)

    def support(self) -> int:
        return 2 * int(np.ceil(4.0 * self.sigma_s(self.iterations))) + 1

    def apply(self, image) -> np.ndarray:
        f = np.asarray(image, dtype=float)
        if f.ndim != 2:
            raise ValueError("image must be a 2D grid")
        if min(f.shape) < self.support():
            raise ImageTooSmallError(
                f"image {f.shape} is smaller than the kernel support {self.support()}")
        for t in range(1, self.iterations + 1):
            f = gaussian_blur(f, self.sigma_c) - self.w_s * gaussian_blur(f, self.sigma_s(t))
        return f


def retina_apply(filt: RetinaFilter, image) -> np.ndarray:
    return filt.apply(image)


def patch_features(image, patch: int = 8) -> np.ndarray:
    """Per-patch ``[mean, gradient magnitude, 4-bin orientation histogram]``.

    Returns shape (n_patches, 6), patches in row-major order. The histogram is
    magnitude-weighted over orientations folded to [0, pi).
    """
    f = np.asarray(image, dtype=float)
    h, w = f.shape
    if h % patch or w % patch:
        raise ValueError(f"image {f.shape} is not divisible into {patch}x{patch} patches")
    gy, gx = np.gradient(f)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / 4)).astype(int), 3)
    out = []
    for i in range(0, h, patch):
        for j in range(0, w, patch):
            sl = (slice(i, i + patch), slice(j, j + patch))
            m = mag[sl]
            hist = np.bincount(bins[sl].ravel(), weights=m.ravel(), minlength=4) / m.size
            out.append(np.concatenate([[f[sl].mean(), m.mean()], hist]))
    return np.array(out)


@dataclass
class PcaProjector:
    components: np.ndarray  # (B, F), orthonormal rows
    mean: np.ndarray        # (F,)
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def project(self, x):
        return (np.asarray(x, dtype=float) - self.mean) @ self.components.T

    def reconstruct(self, y):
        return np.asarray(y, dtype=float) @ self.components + self.mean

    def explained_ratio(self, total_variance):
        return self.explained_variance / total_variance

    def to_bytes(self) -> bytes:
        return pack_tensors({"kind": "pca", "n_components": self.n_components},
                            {"components": self.components, "mean": self.mean,
                             "explained_variance": self.explained_variance})

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcaProjector":
        header, t = unpack_tensors(data)
        if header.get("kind") != "pca":
            raise ValueError("not a PCA projector file")
        return cls(t["components"], t["mean"], t["explained_variance"])


def pca_fit(features, n_components: int = 16, rank_tol: float = 1e-10) -> PcaProjector:
    """Top eigenvectors of the sample covariance with a deterministic sign."""
    x = np.asarray(features, dtype=float)
    n, dim = x.shape
    if dim < n_components:
        raise ValueError(f"feature dimension {dim} is below the requested {n_components} components")
    if n < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} samples, got {n}")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False).reshape(dim, dim)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    rank = int(np.sum(vals > rank_tol * max(vals[0], np.finfo(float).tiny)))
    if rank < n_components:
        raise RankDeficientError(f"covariance rank {rank} is below the requested {n_components} components")
    comps = vecs[:, :n_components].T.copy()
    lead = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(n_components), lead])
    comps *= signs[:, None]
    return PcaProjector(comps, mean, vals[:n_components].copy())


class Pooling(str, enum.Enum):
    NONE = "none"
    CHANNEL_AVERAGE = "channel_average"


@dataclass(frozen=True)
class EndpointSpec:
    b: float = 0.0
    pooling: Pooling = Pooling.NONE
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        if self.b < 0:
            raise ValueError("endpoint noise b must be nonnegative")
        if self.groups < 1:
            raise ValueError("groups must be positive")


def channel_average(y, groups: int):
    """Average contiguous channel groups: (..., B) -> (..., groups)."""
    y = np.asarray(y, dtype=float)
    b = y.shape[-1]
    if b % groups:
        raise ValueError(f"{b} channels do not split into {groups} equal groups")
    return y.reshape(y.shape[:-1] + (groups, b // groups)).mean(axis=-1)


def build_endpoint(features, projector: PcaProjector, spec: EndpointSpec, rng=None):
    """``z_T = pool(P(features)) + b * xi``; ``b = 0`` is deterministic and needs no rng."""
    y = projector.project(features)
    if spec.pooling is Pooling.CHANNEL_AVERAGE:
        y = channel_average(y, spec.groups)
    if spec.b == 0.0:
        return y
    if rng is None:
        raise ValueError("a noise source is required when b > 0")
    return y + spec.b * rng.standard_normal(y.shape)


def demo_images(n: int, size: int = 48, seed: int = 0):
    """Smooth random blob images with random brightness offsets and gains."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    images = []
    for _ in range(n):
        img = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(0, size, 2)
            s = rng.uniform(3, 8)
            img += rng.uniform(0.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        images.append(rng.uniform(0.5, 2.0) * img + rng.uniform(-1, 1))
    return np.array(images)
