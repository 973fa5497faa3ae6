"""Seeded procedural scene generation.

Each scene is a textured ground plane carrying 6-7 objects (a central
removable object ringed by occluders), lit by an environment map plus a
point light, and viewed from a camera on an upper hemisphere. Generation is
a pure function of (seed, config): the returned SceneSpec serializes to
canonical JSON byte-identically across runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .configio import canonical_json
from .envlight import EnvironmentMap, SkyBlob, SkyParams, load_envmap, sky_envmap
from .geometry import TriangleMesh, merge_meshes
from .imaging import ImageBuffer


class SceneGenError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Specs


@dataclass
class TextureSpec:
    family: str  # checker | stripes | noise | voronoi | flat | file
    seed: int = 0
    colors: tuple = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
    cells: int = 4
    orientation: str = "u"
    path: str = ""
    resolution: int = 128


@dataclass
class PlaneSpec:
    half_extent: float
    texture: TextureSpec
    uv_tiles: int = 1


@dataclass
class PrimitiveSpec:
    kind: str  # box | cylinder | sphere
    dims: tuple  # box: (sx,sy,sz); cylinder: (radius,height); sphere: (radius,)
    offset: tuple = (0.0, 0.0, 0.0)


@dataclass
class ObjectPlacement:
    kind: str  # box | cylinder | sphere | composite | mesh
    primitives: tuple = ()
    mesh_path: str = ""
    scale: float = 1.0
    yaw: float = 0.0
    position: tuple = (0.0, 0.0)
    albedo: tuple = (0.8, 0.8, 0.8)


@dataclass
class PointLightSpec:
    position: tuple  # world, y > 0
    intensity: tuple  # RGB radiant intensity per channel


@dataclass
class LightingSpec:
    sky: SkyParams = None
    envmap_path: str = ""
    env_yaw: float = 0.0
    env_gamma: float = 1.0  # nonlinear texel scale (proxy-lighting jitter)
    env_resolution: int = 64  # sky rasterization height
    point_light: PointLightSpec = None


@dataclass
class CameraSpec:
    eye: tuple
    look_at: tuple
    fov: float
    resolution: int


@dataclass
class SceneSpec:
    plane: PlaneSpec
    objects: tuple  # index 0 is the removable central object
    lighting: LightingSpec
    camera: CameraSpec
    seed: int


@dataclass
class SceneGenConfig:
    plane_half_extent: float = 2.0
    placement_margin: float = 0.4
    shadow_margin: float = 0.4
    object_count: tuple = (6, 7)
    ring_radius: tuple = (0.9, 1.5)
    central_scale: tuple = (0.3, 0.5)
    ring_scale: tuple = (0.25, 0.5)
    ring_height_cap: float = 0.7
    composite_prob: float = 0.35
    placement_attempts: int = 100
    shrink_rounds: int = 8
    hemisphere_radius_factor: float = 3.0
    elevation: tuple = (math.radians(15.0), math.radians(70.0))
    pos_jitter: float = 0.05
    fov: float = 0.45
    resolution: int = 64
    light_distance: tuple = (1.5, 4.0)  # in plane half-extents
    light_elevation: tuple = (0.25, 1.35)
    envmap_height: int = 64
    texture_resolution: int = 128
    procedural_sky: bool = True
    envmap_dir: str = ""
    texture_dir: str = ""
    mesh_dir: str = ""
    external_asset_prob: float = 0.5


def derive_seed(root: int, *keys: int) -> int:
    """Stable 63-bit child seed for (root, keys...)."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Textures


def sample_texture_spec(rng: np.random.Generator, config: SceneGenConfig) -> TextureSpec:
    families = ["checker", "stripes", "noise", "voronoi", "flat"]
    seed = int(rng.integers(0, 2**31 - 1))
    if config.texture_dir and rng.uniform() < config.external_asset_prob:
        files = _list_assets(config.texture_dir, (".png", ".pfm"))
        if not files:
            raise SceneGenError(f"texture dir {config.texture_dir!r} has no usable files")
        return TextureSpec(family="file", seed=seed, path=files[int(rng.integers(len(files)))],
                           resolution=config.texture_resolution)
    family = families[int(rng.integers(len(families)))]
    c0 = tuple(float(v) for v in rng.uniform(0.05, 1.0, 3))
    c1 = tuple(float(v) for v in rng.uniform(0.05, 1.0, 3))
    cells = int(rng.integers(2, 9))
    orientation = "u" if rng.uniform() < 0.5 else "v"
    return TextureSpec(family=family, seed=seed, colors=(c0, c1), cells=cells,
                       orientation=orientation, resolution=config.texture_resolution)


def texture_image(spec: TextureSpec, resolution: int = 0) -> ImageBuffer:
    """Deterministic tileable RGB texture in (0, 1]^3."""
    n = resolution or spec.resolution
    u = (np.arange(n) + 0.5) / n
    uu, vv = np.meshgrid(u, u)
    c0 = np.asarray(spec.colors[0], dtype=np.float64)
    c1 = np.asarray(spec.colors[1], dtype=np.float64)

    if spec.family == "flat":
        img = np.broadcast_to(c0, (n, n, 3)).copy()
    elif spec.family == "checker":
        k = spec.cells
        sel = ((np.floor(uu * k) + np.floor(vv * k)) % 2)[:, :, None]
        img = c0 * (1 - sel) + c1 * sel
    elif spec.family == "stripes":
        t = uu if spec.orientation == "u" else vv
        sel = (np.floor(t * spec.cells * 2) % 2)[:, :, None]
        img = c0 * (1 - sel) + c1 * sel
    elif spec.family == "noise":
        field2 = _value_noise(spec.seed, n, base=max(2, spec.cells // 2), octaves=3)
        img = c0 + (c1 - c0) * field2[:, :, None]
    elif spec.family == "voronoi":
        img = _voronoi(spec.seed, n, npoints=4 + spec.cells * 2)
    elif spec.family == "file":
        img = _load_texture_file(spec.path, n)
    else:
        raise SceneGenError(f"unknown texture family {spec.family!r}")
    return ImageBuffer(np.clip(img, 0.05, 1.0).astype(np.float32))


def generate_texture(rng: np.random.Generator, config: SceneGenConfig) -> ImageBuffer:
    return texture_image(sample_texture_spec(rng, config))


def _value_noise(seed: int, n: int, base: int, octaves: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.zeros((n, n))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        g = base * (2**o)
        lattice = rng.uniform(0.0, 1.0, (g, g))
        fy = (np.arange(n) + 0.5) / n * g
        y0 = np.floor(fy).astype(int) % g
        ty = _smoothstep(fy - np.floor(fy))
        x0 = y0  # square texture: same sampling along both axes
        tx = ty
        a = lattice[np.ix_(y0, x0)]
        b = lattice[np.ix_(y0, (x0 + 1) % g)]
        c = lattice[np.ix_((y0 + 1) % g, x0)]
        d = lattice[np.ix_((y0 + 1) % g, (x0 + 1) % g)]
        top = a + (b - a) * tx[None, :]
        bot = c + (d - c) * tx[None, :]
        out += amp * (top + (bot - top) * ty[:, None])
        total += amp
        amp *= 0.5
    return out / total


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _voronoi(seed: int, n: int, npoints: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, (npoints, 2))
    colors = rng.uniform(0.05, 1.0, (npoints, 3))
    u = (np.arange(n) + 0.5) / n
    uu, vv = np.meshgrid(u, u)
    du = np.abs(uu[:, :, None] - pts[None, None, :, 0])
    dv = np.abs(vv[:, :, None] - pts[None, None, :, 1])
    du = np.minimum(du, 1.0 - du)  # torus wrap keeps the tile seamless
    dv = np.minimum(dv, 1.0 - dv)
    idx = np.argmin(du * du + dv * dv, axis=2)
    return colors[idx]


def _load_texture_file(path, n: int) -> np.ndarray:
    from .imaging import read_pfm

    if str(path).endswith(".pfm"):
        img = read_pfm(path).data
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    ys = (np.arange(n) * img.shape[0] // n).clip(0, img.shape[0] - 1)
    xs = (np.arange(n) * img.shape[1] // n).clip(0, img.shape[1] - 1)
    return img[np.ix_(ys, xs)]


def _list_assets(directory, suffixes) -> list:
    try:
        names = sorted(os.listdir(directory))
    except OSError as e:
        raise SceneGenError(f"cannot list asset dir {directory!r}: {e}") from e
    return [os.path.join(directory, f) for f in names if f.lower().endswith(suffixes)]


# ---------------------------------------------------------------------------
# Objects


_PRIM_KINDS = ("box", "cylinder", "sphere")


def _sample_primitive(rng: np.random.Generator) -> PrimitiveSpec:
    kind = _PRIM_KINDS[int(rng.integers(3))]
    if kind == "box":
        dims = tuple(float(v) for v in rng.uniform(0.3, 1.0, 3))
    elif kind == "cylinder":
        dims = (float(rng.uniform(0.15, 0.5)), float(rng.uniform(0.3, 1.0)))
    else:
        dims = (float(rng.uniform(0.2, 0.5)),)
    return PrimitiveSpec(kind=kind, dims=dims)


def _prim_height(p: PrimitiveSpec) -> float:
    if p.kind == "box":
        return p.dims[1]
    if p.kind == "cylinder":
        return p.dims[1]
    return 2.0 * p.dims[0]


def sample_object(rng: np.random.Generator, config: SceneGenConfig,
                  central: bool) -> ObjectPlacement:
    scale_range = config.central_scale if central else config.ring_scale
    scale = float(rng.uniform(*scale_range))
    albedo = tuple(float(v) for v in rng.uniform(0.1, 1.0, 3))
    if config.mesh_dir and rng.uniform() < config.external_asset_prob:
        files = _list_assets(config.mesh_dir, (".obj",))
        if not files:
            raise SceneGenError(f"mesh dir {config.mesh_dir!r} has no .obj files")
        return ObjectPlacement(kind="mesh", mesh_path=files[int(rng.integers(len(files)))],
                               scale=scale, albedo=albedo)
    if rng.uniform() < config.composite_prob:
        count = int(rng.integers(2, 5))
        prims = []
        y = 0.0
        for _ in range(count):
            p = _sample_primitive(rng)
            jitter = rng.uniform(-0.1, 0.1, 2)
            prims.append(replace(p, offset=(float(jitter[0]), y, float(jitter[1]))))
            y += _prim_height(p)
        return ObjectPlacement(kind="composite", primitives=tuple(prims),
                               scale=scale, albedo=albedo)
    p = _sample_primitive(rng)
    return ObjectPlacement(kind=p.kind, primitives=(p,), scale=scale, albedo=albedo)


def object_mesh(obj: ObjectPlacement) -> TriangleMesh:
    """World-space mesh for a placement; lowest vertex exactly on y=0."""
    if obj.kind == "mesh":
        base = load_obj(obj.mesh_path, albedo=obj.albedo)
    else:
        parts = []
        for p in obj.primitives:
            if p.kind == "box":
                m = geometry.box_mesh(*p.dims, albedo=obj.albedo)
            elif p.kind == "cylinder":
                m = geometry.cylinder_mesh(*p.dims, albedo=obj.albedo)
            elif p.kind == "sphere":
                m = geometry.sphere_mesh(p.dims[0], albedo=obj.albedo)
            else:
                raise SceneGenError(f"unknown primitive kind {p.kind!r}")
            v = m.vertices + np.asarray(p.offset, dtype=np.float64)
            parts.append(TriangleMesh(v, m.triangles, m.face_albedo, m.face_textured))
        base = merge_meshes(parts)
    placed = base.transformed(scale=obj.scale, yaw=obj.yaw).snapped_to_ground()
    v = placed.vertices.copy()
    v[:, 0] += obj.position[0]
    v[:, 2] += obj.position[1]
    mesh = TriangleMesh(v, placed.triangles, placed.face_albedo,
                        placed.face_textured).without_degenerate_faces()
    # Faces lying exactly in the ground plane would z-fight the plane quad
    # and are never visible; drop them (vertices stay, so the lowest-vertex
    # invariant is unaffected).
    on_ground = (mesh.vertices[mesh.triangles][:, :, 1] == 0.0).all(axis=1)
    return TriangleMesh(mesh.vertices, mesh.triangles[~on_ground],
                        mesh.face_albedo[~on_ground], mesh.face_textured[~on_ground])


def load_obj(path, albedo=(0.8, 0.8, 0.8)) -> TriangleMesh:
    """Minimal OBJ reader: v and (triangulated) f records only."""
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise SceneGenError(f"{path}: no usable geometry")
    return geometry._faced(np.array(verts, float), np.array(tris, np.int32), albedo)


def _footprint(obj: ObjectPlacement) -> tuple:
    """(xmin, xmax, zmin, zmax) of the object's world AABB on the plane."""
    lo, hi = object_mesh(obj).aabb()
    return (lo[0], hi[0], lo[2], hi[2])


def _boxes_disjoint(a, b) -> bool:
    return a[1] <= b[0] or b[1] <= a[0] or a[3] <= b[2] or b[3] <= a[2]


def _inside_plane(bb, limit: float) -> bool:
    return bb[0] >= -limit and bb[1] <= limit and bb[2] >= -limit and bb[3] <= limit


def central_height_cap(config: SceneGenConfig, elevation: float = 0.0) -> float:
    """Max central-object height whose occluded plane region, seen from a
    camera at the given elevation (default: the lowest allowed), still lands
    within the plane. Keeps the ground texture defined behind the removed
    object in every composed target image."""
    e = 0.8 * config.plane_half_extent
    r = config.hemisphere_radius_factor * config.plane_half_extent
    theta = elevation or config.elevation[0]
    return e * r * math.sin(theta) / (r * math.cos(theta) + e)


def _capped(obj: ObjectPlacement, cap: float) -> ObjectPlacement:
    height = object_mesh(obj).aabb()[1][1]
    if height > cap:
        return replace(obj, scale=obj.scale * cap / height)
    return obj


# ---------------------------------------------------------------------------
# Lighting and camera


def sample_sky(rng: np.random.Generator) -> SkyParams:
    horizon = tuple(float(v) for v in rng.uniform(0.2, 1.0, 3))
    zenith = tuple(float(v) for v in rng.uniform(0.2, 1.0, 3))
    nblobs = int(rng.integers(1, 4))
    blobs = []
    for _ in range(nblobs):
        tint = rng.uniform(0.6, 1.0, 3)
        strength = float(rng.uniform(2.0, 8.0))
        blobs.append(SkyBlob(
            azimuth=float(rng.uniform(0.0, 2.0 * math.pi)),
            elevation=float(rng.uniform(0.3, 1.3)),
            intensity=tuple(float(strength * t) for t in tint),
            sharpness=float(rng.uniform(0.25, 0.6)),
        ))
    return SkyParams(horizon=horizon, zenith=zenith, blobs=tuple(blobs))


def build_envmap(lighting: LightingSpec, height: int = 0) -> EnvironmentMap:
    if lighting.envmap_path:
        env = load_envmap(lighting.envmap_path, yaw=lighting.env_yaw)
    elif lighting.sky is not None:
        env = sky_envmap(lighting.sky, height=height or lighting.env_resolution)
        env.yaw = lighting.env_yaw
    else:
        raise SceneGenError("lighting has neither an envmap path nor sky parameters")
    if lighting.env_gamma != 1.0:
        env = EnvironmentMap(
            ImageBuffer(np.power(env.image.data, np.float32(lighting.env_gamma))),
            yaw=env.yaw)
    return env


def sample_lighting(rng: np.random.Generator, config: SceneGenConfig,
                    envmap_peak: np.ndarray) -> "tuple[float, PointLightSpec]":
    """Draws the envmap yaw and the point light, bounded by the envmap peak."""
    env_yaw = float(rng.uniform(0.0, 2.0 * math.pi))
    dist = float(rng.uniform(*config.light_distance)) * config.plane_half_extent
    az = float(rng.uniform(0.0, 2.0 * math.pi))
    el = float(rng.uniform(*config.light_elevation))
    pos = (dist * math.cos(el) * math.cos(az), dist * math.sin(el),
           dist * math.cos(el) * math.sin(az))
    intensity = tuple(float(rng.uniform(0.0, p)) for p in np.asarray(envmap_peak))
    return env_yaw, PointLightSpec(position=pos, intensity=intensity)


def sample_camera(rng: np.random.Generator, config: SceneGenConfig) -> CameraSpec:
    if not (0.0 < config.elevation[0] < config.elevation[1] < math.pi / 2):
        raise SceneGenError("camera elevation bounds must satisfy 0 < min < max < pi/2")
    radius = config.hemisphere_radius_factor * config.plane_half_extent
    az = float(rng.uniform(0.0, 2.0 * math.pi))
    el = float(rng.uniform(*config.elevation))
    eye = np.array([radius * math.cos(el) * math.cos(az),
                    radius * math.sin(el),
                    radius * math.cos(el) * math.sin(az)])
    # Jitter translates eye and target together, preserving orientation.
    delta = rng.normal(0.0, 1.0, 3) * config.pos_jitter
    return CameraSpec(eye=tuple(float(v) for v in eye + delta),
                      look_at=tuple(float(v) for v in delta),
                      fov=config.fov, resolution=config.resolution)


# ---------------------------------------------------------------------------
# Scene assembly


def generate_scene(seed: int, config: SceneGenConfig) -> SceneSpec:
    rng = np.random.default_rng(int(seed))

    camera = sample_camera(rng, config)
    offset = np.asarray(camera.eye) - np.asarray(camera.look_at)
    cam_elevation = math.asin(offset[1] / np.linalg.norm(offset))

    texture = sample_texture_spec(rng, config)
    plane = PlaneSpec(half_extent=config.plane_half_extent, texture=texture,
                      uv_tiles=int(rng.integers(1, 4)))

    count = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    central = _capped(sample_object(rng, config, central=True),
                      central_height_cap(config, cam_elevation))
    objects = [central]
    boxes = [_footprint(central)]
    limit = config.plane_half_extent - config.placement_margin

    for _ in range(count - 1):
        obj = _capped(sample_object(rng, config, central=False), config.ring_height_cap)
        placed = None
        for _ in range(config.shrink_rounds):
            for _ in range(config.placement_attempts):
                radius = float(rng.uniform(*config.ring_radius))
                angle = float(rng.uniform(0.0, 2.0 * math.pi))
                cand = replace(obj, yaw=float(rng.uniform(0.0, 2.0 * math.pi)),
                               position=(radius * math.cos(angle), radius * math.sin(angle)))
                bb = _footprint(cand)
                if _inside_plane(bb, limit) and all(_boxes_disjoint(bb, b) for b in boxes):
                    placed = (cand, bb)
                    break
            if placed:
                break
            obj = replace(obj, scale=obj.scale * 0.9)
        if placed is None:
            raise SceneGenError(f"object placement infeasible for seed {seed}")
        objects.append(placed[0])
        boxes.append(placed[1])

    if config.envmap_dir:
        maps = _list_assets(config.envmap_dir, (".pfm",))
        if not maps:
            raise SceneGenError(f"envmap dir {config.envmap_dir!r} has no .pfm files")
        lighting = LightingSpec(envmap_path=maps[int(rng.integers(len(maps)))],
                                env_resolution=config.envmap_height)
    elif config.procedural_sky:
        lighting = LightingSpec(sky=sample_sky(rng), env_resolution=config.envmap_height)
    else:
        raise SceneGenError("no envmap dir given and procedural sky disabled")
    env = build_envmap(lighting)
    env_yaw, point = sample_lighting(rng, config, env.peak())
    lighting = replace(lighting, env_yaw=env_yaw, point_light=point)

    return SceneSpec(plane=plane, objects=tuple(objects), lighting=lighting,
                     camera=camera, seed=int(seed))


def scene_to_json(spec: SceneSpec) -> str:
    return canonical_json(spec)


def scene_from_json(text: str) -> SceneSpec:
    d = json.loads(text)

    def tup(x):
        return tuple(tup(v) if isinstance(v, list) else v for v in x)

    sky = d["lighting"].get("sky")
    sky_obj = None
    if sky is not None:
        sky_obj = SkyParams(horizon=tup(sky["horizon"]), zenith=tup(sky["zenith"]),
                            ground_factor=sky["ground_factor"],
                            blobs=tuple(SkyBlob(azimuth=b["azimuth"], elevation=b["elevation"],
                                                intensity=tup(b["intensity"]),
                                                sharpness=b["sharpness"])
                                        for b in sky["blobs"]))
    point = d["lighting"].get("point_light")
    point_obj = None
    if point is not None:
        point_obj = PointLightSpec(position=tup(point["position"]),
                                   intensity=tup(point["intensity"]))
    lighting = LightingSpec(sky=sky_obj, envmap_path=d["lighting"]["envmap_path"],
                            env_yaw=d["lighting"]["env_yaw"],
                            env_gamma=d["lighting"]["env_gamma"],
                            env_resolution=d["lighting"]["env_resolution"],
                            point_light=point_obj)
    tex = d["plane"]["texture"]
    plane = PlaneSpec(half_extent=d["plane"]["half_extent"],
                      texture=TextureSpec(family=tex["family"], seed=tex["seed"],
                                          colors=tup(tex["colors"]), cells=tex["cells"],
                                          orientation=tex["orientation"], path=tex["path"],
                                          resolution=tex["resolution"]),
                      uv_tiles=d["plane"]["uv_tiles"])
    objects = tuple(
        ObjectPlacement(kind=o["kind"],
                        primitives=tuple(PrimitiveSpec(kind=p["kind"], dims=tup(p["dims"]),
                                                       offset=tup(p["offset"]))
                                         for p in o["primitives"]),
                        mesh_path=o["mesh_path"], scale=o["scale"], yaw=o["yaw"],
                        position=tup(o["position"]), albedo=tup(o["albedo"]))
        for o in d["objects"])
    camera = CameraSpec(eye=tup(d["camera"]["eye"]), look_at=tup(d["camera"]["look_at"]),
                        fov=d["camera"]["fov"], resolution=d["camera"]["resolution"])
    return SceneSpec(plane=plane, objects=objects, lighting=lighting, camera=camera,
                     seed=d["seed"])
