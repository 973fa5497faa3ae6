"""Renderer entry points: radiance variants, depth maps, proxy meshes.

Determinism contract: identical (scene, config, seed) produce bit-identical
images. Primary rays go through pixel centers; the only stochastic element
is the stratified cosine sampling of the environment, whose per-tile
streams derive from (seed, tile index), so tiled/parallel execution equals
serial execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import TriangleMesh, merge_meshes, plane_mesh
from ..imaging import ImageBuffer, MaskImage
from ..scenegen import (
    CameraSpec,
    LightingSpec,
    PlaneSpec,
    SceneSpec,
    build_envmap,
    object_mesh,
    texture_image,
)
from .bvh import FlatBVH, build_bvh
from .kernels import trace_depth, trace_image

SAMPLE_TILE = 16

RADIANCE_VARIANTS = ("texture-only", "white-plane-full", "white-plane-removed")
DEPTH_VARIANTS = ("full", "removed", "plane-only")


class RenderError(ValueError):
    pass


@dataclass
class RenderConfig:
    samples_per_pixel: int = 1  # repeated light estimates per pixel
    shadow_samples: int = 64  # environment shadow rays per estimate
    seed: int = 0
    resolution: int = 0  # 0 = use the camera's resolution

    def __post_init__(self):
        if self.samples_per_pixel < 1 or self.shadow_samples < 1:
            raise RenderError("sample counts must be >= 1")

    @property
    def env_rays(self) -> int:
        return self.samples_per_pixel * self.shadow_samples


@dataclass
class DepthNoiseConfig:
    # sigma(z) = sigma0 + sigma1 * z^2, in world units
    sigma0: float = 0.002
    sigma1: float = 0.002
    seed: int = 0


@dataclass
class LightingPerturbConfig:
    pos_sigma_frac: float = 0.1
    intensity_scale: tuple = (0.7, 1.4)
    color_jitter: float = 0.1
    gamma: tuple = (0.8, 1.25)
    yaw_max: float = math.radians(10.0)


@dataclass
class RenderOutputs:
    texture: ImageBuffer  # ground-plane albedo image
    lighting: ImageBuffer  # full scene, white plane
    lighting_removed: ImageBuffer  # central object removed, white plane
    depth: ImageBuffer
    depth_removed: ImageBuffer
    depth_plane: ImageBuffer


def camera_rays(camera: CameraSpec, resolution: int = 0):
    """Pixel-center primary rays; returns (origins, dirs) as (N,3) float64."""
    res = resolution or camera.resolution
    eye = np.asarray(camera.eye, dtype=np.float64)
    look = np.asarray(camera.look_at, dtype=np.float64)
    fwd = look - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.999 else np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    upv = np.cross(right, fwd)
    th = math.tan(camera.fov / 2.0)
    xs = ((np.arange(res) + 0.5) / res * 2.0 - 1.0) * th
    ys = (1.0 - (np.arange(res) + 0.5) / res * 2.0) * th
    dirs = (fwd[None, None, :]
            + xs[None, :, None] * right[None, None, :]
            + ys[:, None, None] * upv[None, None, :])
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    dirs = dirs.reshape(-1, 3)
    origins = np.broadcast_to(eye, dirs.shape).copy()
    return origins, dirs


def stratified_samples(seed: int, height: int, width: int, count: int) -> np.ndarray:
    """(H*W, count, 2) jitters; stratified over the largest square grid that
    fits in count. Streams are per 16x16 tile, keyed by (seed, tile index)."""
    out = np.empty((height * width, count, 2), dtype=np.float32)
    grid = int(math.isqrt(count))
    cells = np.arange(grid * grid)
    ci = (cells // grid).astype(np.float64)
    cj = (cells % grid).astype(np.float64)
    tiles_x = (width + SAMPLE_TILE - 1) // SAMPLE_TILE
    tiles_y = (height + SAMPLE_TILE - 1) // SAMPLE_TILE
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile_index = ty * tiles_x + tx
            key = ((int(seed) & (2**64 - 1)) << 64) | tile_index
            rng = np.random.Generator(np.random.Philox(key=key))
            y0, y1 = ty * SAMPLE_TILE, min((ty + 1) * SAMPLE_TILE, height)
            x0, x1 = tx * SAMPLE_TILE, min((tx + 1) * SAMPLE_TILE, width)
            npix = (y1 - y0) * (x1 - x0)
            u = rng.random((npix, count, 2))
            u[:, : grid * grid, 0] = (ci[None, :] + u[:, : grid * grid, 0]) / grid
            u[:, : grid * grid, 1] = (cj[None, :] + u[:, : grid * grid, 1]) / grid
            rows = np.repeat(np.arange(y0, y1), x1 - x0)
            cols = np.tile(np.arange(x0, x1), y1 - y0)
            out[rows * width + cols] = u.astype(np.float32)
    return out


_DUMMY_TEX = np.zeros((1, 1, 3), dtype=np.float32)
_DUMMY_ENV = np.zeros((1, 2, 3), dtype=np.float32)
_ZERO3 = np.zeros(3, dtype=np.float64)


def _trace(bvh: FlatBVH, camera: CameraSpec, resolution: int, *,
           samples: np.ndarray, tex=None, tex_params=(1.0, 1),
           env=None, env_yaw=0.0, light=None, albedo_only=False):
    origins, dirs = camera_rays(camera, resolution)
    res = resolution or camera.resolution
    light_pos, light_int, light_on = _ZERO3, _ZERO3, False
    if light is not None:
        light_pos = np.asarray(light.position, dtype=np.float64)
        light_int = np.asarray(light.intensity, dtype=np.float64)
        light_on = bool(np.any(light_int > 0.0))
    img, depth = trace_image(
        origins, dirs,
        bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.tri_order,
        bvh.tri_v0, bvh.tri_e1, bvh.tri_e2, bvh.tri_albedo, bvh.tri_textured,
        tex if tex is not None else _DUMMY_TEX,
        float(tex_params[0]), int(tex_params[1]),
        env if env is not None else _DUMMY_ENV, float(env_yaw), env is not None,
        light_pos, light_int, light_on,
        samples, albedo_only,
    )
    return img.reshape(res, res, 3), depth.reshape(res, res)


def _scene_mesh(scene: SceneSpec, *, plane_white: bool, include_objects: bool,
                drop_central: bool) -> TriangleMesh:
    parts = [plane_mesh(scene.plane.half_extent,
                        albedo=(1.0, 1.0, 1.0), textured=not plane_white)]
    if include_objects:
        objs = scene.objects[1:] if drop_central else scene.objects
        parts.extend(object_mesh(o) for o in objs)
    return merge_meshes(parts)


def render_radiance(scene: SceneSpec, variant: str, cfg: RenderConfig) -> ImageBuffer:
    """Lambertian direct lighting.

    texture-only:        the ground plane alone; returns its albedo texture
                         (the reflectance target image), no lighting applied.
    white-plane-full:    all objects on a white plane under the scene lights.
    white-plane-removed: the same with the central object deleted.
    """
    if variant not in RADIANCE_VARIANTS:
        raise RenderError(f"unknown radiance variant {variant!r}")
    res = cfg.resolution or scene.camera.resolution
    if variant == "texture-only":
        mesh = _scene_mesh(scene, plane_white=False, include_objects=False,
                           drop_central=False)
        tex = texture_image(scene.plane.texture)
        samples = np.zeros((res * res, 1, 2), dtype=np.float32)
        img, _ = _trace(build_bvh(mesh), scene.camera, res, samples=samples,
                        tex=tex.data, tex_params=(scene.plane.half_extent,
                                                  scene.plane.uv_tiles),
                        albedo_only=True)
        return ImageBuffer(img)
    mesh = _scene_mesh(scene, plane_white=True, include_objects=True,
                       drop_central=(variant == "white-plane-removed"))
    env = build_envmap(scene.lighting)
    samples = stratified_samples(cfg.seed, res, res, cfg.env_rays)
    img, _ = _trace(build_bvh(mesh), scene.camera, res, samples=samples,
                    env=env.image.data, env_yaw=env.yaw,
                    light=scene.lighting.point_light)
    return ImageBuffer(img)


def render_depth(scene: SceneSpec, variant: str, camera: CameraSpec = None,
                 resolution: int = 0) -> ImageBuffer:
    """Primary-ray hit distance; +inf where nothing is hit. Noise-free."""
    if variant not in DEPTH_VARIANTS:
        raise RenderError(f"unknown depth variant {variant!r}")
    cam = camera or scene.camera
    res = resolution or cam.resolution
    mesh = _scene_mesh(scene, plane_white=True,
                       include_objects=(variant != "plane-only"),
                       drop_central=(variant == "removed"))
    bvh = build_bvh(mesh)
    origins, dirs = camera_rays(cam, res)
    depth = trace_depth(origins, dirs,
                        bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_right,
                        bvh.node_start, bvh.node_count, bvh.tri_order,
                        bvh.tri_v0, bvh.tri_e1, bvh.tri_e2)
    return ImageBuffer(depth.reshape(res, res, 1).astype(np.float32))


def render_scene_images(scene: SceneSpec, cfg: RenderConfig) -> RenderOutputs:
    """The six per-scene images. Both lighting renders share cfg.seed so
    their sample sets match and differences stay local to the removed
    object's shadow and silhouette."""
    return RenderOutputs(
        texture=render_radiance(scene, "texture-only", cfg),
        lighting=render_radiance(scene, "white-plane-full", cfg),
        lighting_removed=render_radiance(scene, "white-plane-removed", cfg),
        depth=render_depth(scene, "full", resolution=cfg.resolution),
        depth_removed=render_depth(scene, "removed", resolution=cfg.resolution),
        depth_plane=render_depth(scene, "plane-only", resolution=cfg.resolution),
    )


# ---------------------------------------------------------------------------
# Proxy geometry


def _fit_plane(points: np.ndarray):
    """Least-squares plane; returns (unit normal, centroid)."""
    if len(points) < 3:
        raise RenderError("plane fit needs at least 3 points")
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[1] < 0:
        normal = -normal
    return normal, centroid


def build_proxy_mesh(depth: ImageBuffer, camera: CameraSpec,
                     noise_cfg: DepthNoiseConfig, plane: PlaneSpec,
                     object_mask: MaskImage) -> tuple:
    """Approximate scene geometry from the unedited depth map.

    Depth gets Kinect-style noise, pixels are unprojected to a vertex grid,
    ground pixels are snapped onto a least-squares plane fitted to their
    noisy positions, and triangles spanning depth discontinuities are
    dropped. The removed-object pixels of the second mesh are re-projected
    onto the fitted plane so the ground continues behind the deleted object.
    """
    h, w = depth.height, depth.width
    if (object_mask.height, object_mask.width) != (h, w):
        raise RenderError("depth/object-mask shape mismatch")
    origins, dirs = camera_rays(camera, h)
    if origins.shape[0] != h * w:
        raise RenderError("camera resolution does not match the depth map")
    d = depth.data[:, :, 0].astype(np.float64).reshape(-1)
    valid = np.isfinite(d)
    if valid.sum() < 3:
        raise RenderError("depth map has fewer than 3 finite pixels")

    points = origins + d[:, None] * dirs
    ground = valid & (np.abs(points[:, 1]) < 1e-6 * (1.0 + d))

    rng = np.random.default_rng(noise_cfg.seed)
    sigma = noise_cfg.sigma0 + noise_cfg.sigma1 * np.square(d[valid])
    noisy = d.copy()
    noisy[valid] += rng.normal(0.0, 1.0, valid.sum()) * sigma

    normal, centroid = _fit_plane(origins[ground] + noisy[ground, None] * dirs[ground])
    denom = dirs @ normal
    t_plane = np.where(np.abs(denom) > 1e-12,
                       ((centroid - origins[0]) @ normal) / denom, -1.0)

    field_full = np.where(valid, noisy, np.nan)
    field_full[ground] = t_plane[ground]
    field_full[ground & (t_plane <= 0)] = np.nan

    removed = object_mask.data.reshape(-1) > 0.5
    field_removed = field_full.copy()
    field_removed[removed] = np.where(t_plane[removed] > 0, t_plane[removed], np.nan)

    # One discontinuity threshold for both meshes: deleting the object must
    # not re-tune the silhouette handling elsewhere in the proxy.
    tau = _discontinuity_threshold(field_full.reshape(h, w))
    full_mesh = _mesh_from_depth_field(field_full.reshape(h, w), origins, dirs, tau)
    removed_mesh = _mesh_from_depth_field(field_removed.reshape(h, w), origins, dirs, tau)
    return full_mesh, removed_mesh


def _discontinuity_threshold(field: np.ndarray) -> float:
    dx = np.abs(np.diff(field, axis=1))
    dy = np.abs(np.diff(field, axis=0))
    diffs = np.concatenate([dx[np.isfinite(dx)], dy[np.isfinite(dy)]])
    if len(diffs) == 0:
        return np.inf
    tau = 5.0 * float(np.median(diffs))
    return tau if np.isfinite(tau) and tau > 0 else np.inf


def _mesh_from_depth_field(field: np.ndarray, origins, dirs, tau: float) -> TriangleMesh:
    h, w = field.shape
    flat = field.reshape(-1)
    valid = np.isfinite(flat)
    verts = origins[valid] + flat[valid, None] * dirs[valid]
    index = np.full(h * w, -1, dtype=np.int64)
    index[valid] = np.arange(valid.sum())

    i00 = np.arange(h * w).reshape(h, w)[:-1, :-1].reshape(-1)
    quads = np.stack([i00, i00 + 1, i00 + w, i00 + w + 1], axis=1)
    dq = flat[quads]
    ok = np.isfinite(dq).all(axis=1)
    spread = np.where(ok, dq.max(axis=1, initial=-np.inf, where=np.isfinite(dq))
                      - dq.min(axis=1, initial=np.inf, where=np.isfinite(dq)), 0.0)
    ok &= spread <= tau
    q = quads[ok]
    tris = np.concatenate([
        np.stack([q[:, 0], q[:, 2], q[:, 1]], axis=1),
        np.stack([q[:, 1], q[:, 2], q[:, 3]], axis=1),
    ])
    tris = index[tris]
    albedo = np.ones((len(tris), 3), dtype=np.float32)
    return TriangleMesh(verts, tris.astype(np.int32), albedo).without_degenerate_faces()


def perturb_lighting(lighting: LightingSpec, rng: np.random.Generator,
                     cfg: LightingPerturbConfig) -> LightingSpec:
    """Jitters the point light, gamma-scales and re-rotates the envmap."""
    point = lighting.point_light
    if point is not None:
        pos = np.asarray(point.position, dtype=np.float64)
        sigma = cfg.pos_sigma_frac * np.linalg.norm(pos)
        pos = pos + rng.normal(0.0, 1.0, 3) * sigma
        overall = float(rng.uniform(*cfg.intensity_scale))
        color = rng.uniform(1.0 - cfg.color_jitter, 1.0 + cfg.color_jitter, 3)
        intensity = tuple(float(v * overall * c)
                          for v, c in zip(point.intensity, color))
        point = replace(point, position=tuple(float(v) for v in pos),
                        intensity=intensity)
    gamma = float(rng.uniform(*cfg.gamma))
    yaw_off = float(rng.uniform(-cfg.yaw_max, cfg.yaw_max))
    return replace(lighting, point_light=point,
                   env_gamma=lighting.env_gamma * gamma,
                   env_yaw=lighting.env_yaw + yaw_off)


def render_proxy_pair(proxies: tuple, lighting: LightingSpec, camera: CameraSpec,
                      cfg: RenderConfig) -> tuple:
    """Renders the proxy meshes under (perturbed) lighting, all-white
    materials; returns the unedited and target proxy images."""
    res = cfg.resolution or camera.resolution
    env = build_envmap(lighting)
    samples = stratified_samples(cfg.seed, res, res, cfg.env_rays)
    out = []
    for mesh in proxies:
        img, _ = _trace(build_bvh(mesh), camera, res, samples=samples,
                        env=env.image.data, env_yaw=env.yaw,
                        light=lighting.point_light)
        out.append(ImageBuffer(img))
    return out[0], out[1]
