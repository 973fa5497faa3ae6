"""Environment lighting: equirectangular maps and the procedural sky.

The sky model is a two-band hemisphere gradient (horizon -> zenith) over a
dim ground band, plus one to three Gaussian radiance blobs that act as soft
or hard distant sources. It stands in for captured HDRI maps whenever no
map files are supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import ImageBuffer, read_pfm


class EnvmapError(ValueError):
    pass


@dataclass
class SkyBlob:
    azimuth: float
    elevation: float
    intensity: tuple  # RGB radiance added at the blob center
    sharpness: float  # angular sigma in radians


@dataclass
class SkyParams:
    horizon: tuple  # RGB
    zenith: tuple  # RGB
    ground_factor: float = 0.25
    blobs: tuple = field(default_factory=tuple)


@dataclass
class EnvironmentMap:
    """Equirectangular radiance map, width = 2 x height, y-up."""

    image: ImageBuffer
    yaw: float = 0.0

    def __post_init__(self):
        if self.image.width != 2 * self.image.height:
            raise EnvmapError(
                f"envmap must be 2:1 equirectangular, got {self.image.width}x{self.image.height}"
            )
        if self.image.channels != 3:
            raise EnvmapError("envmap must be RGB")
        if not np.isfinite(self.image.data).all() or self.image.data.min() < 0:
            raise EnvmapError("envmap texels must be finite and >= 0")

    def peak(self) -> np.ndarray:
        return self.image.data.reshape(-1, 3).max(axis=0)


def _blob_direction(blob: SkyBlob) -> np.ndarray:
    ce = np.cos(blob.elevation)
    return np.array([ce * np.cos(blob.azimuth), np.sin(blob.elevation), ce * np.sin(blob.azimuth)])


def sky_envmap(sky: SkyParams, height: int = 64) -> EnvironmentMap:
    """Rasterizes the procedural sky to an equirect map (deterministic)."""
    width = 2 * height
    v = (np.arange(height) + 0.5) / height  # 0 = zenith row
    u = (np.arange(width) + 0.5) / width
    theta = v * np.pi
    phi = u * 2.0 * np.pi
    dy = np.cos(theta)[:, None]
    sy = np.sin(theta)[:, None]
    dx = sy * np.cos(phi)[None, :]
    dz = sy * np.sin(phi)[None, :]
    dirs = np.stack([np.broadcast_to(dx, (height, width)),
                     np.broadcast_to(dy, (height, width)),
                     np.broadcast_to(dz, (height, width))], axis=-1)

    horizon = np.asarray(sky.horizon, dtype=np.float64)
    zenith = np.asarray(sky.zenith, dtype=np.float64)
    up = np.clip(dirs[:, :, 1], 0.0, 1.0)[:, :, None]
    base = horizon + (zenith - horizon) * up
    below = dirs[:, :, 1] < 0.0
    base[below] = horizon * sky.ground_factor

    out = base
    for blob in sky.blobs:
        d = _blob_direction(blob)
        cosang = np.clip(dirs @ d, -1.0, 1.0)
        falloff = np.exp((cosang - 1.0) / (blob.sharpness ** 2))
        out = out + np.asarray(blob.intensity, dtype=np.float64) * falloff[:, :, None]
    return EnvironmentMap(ImageBuffer(out.astype(np.float32)))


def load_envmap(path, yaw: float = 0.0) -> EnvironmentMap:
    img = read_pfm(path)
    if img.channels == 1:
        img = ImageBuffer(np.repeat(img.data, 3, axis=2))
    return EnvironmentMap(img, yaw=yaw)


def lookup_direction(env: EnvironmentMap, direction: np.ndarray) -> np.ndarray:
    """Nearest-texel radiance along a unit direction (reference path; the
    renderer kernels carry their own copy of this math)."""
    d = direction / np.linalg.norm(direction)
    theta = np.arccos(np.clip(d[1], -1.0, 1.0))
    phi = np.arctan2(d[2], d[0]) - env.yaw
    u = (phi / (2.0 * np.pi)) % 1.0
    v = theta / np.pi
    h, w = env.image.height, env.image.width
    x = min(int(u * w), w - 1)
    y = min(int(v * h), h - 1)
    return env.image.data[y, x]
