"""Training-sample assembly: masks, composition, augmentation, shadow
ground truth, normalization, and on-disk persistence.

Composition happens from the *normalized* lighting images so the stored
sample satisfies the exact identity

    image = (receiver_mask * texture + (1 - receiver_mask)) * lighting

while the input-domain scale (channel mean 0.5 on the receiver) is only
recorded; it is applied when images enter the networks, at train and test
time alike.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .configio import canonical_json, config_hash
from .imaging import (
    ImageBuffer,
    ImageError,
    MaskImage,
    channelwise_median,
    read_pfm,
    read_png_mask,
    write_pfm,
    write_pfm_depth,
    write_png_mask,
)
from .render import (
    DepthNoiseConfig,
    LightingPerturbConfig,
    RenderConfig,
    build_proxy_mesh,
    perturb_lighting,
    render_proxy_pair,
)
from .render.core import render_scene_images
from .scenegen import SceneGenConfig, SceneSpec, derive_seed, generate_scene, scene_to_json

RECEIVER_DEPTH_TOL = 1e-4

SAMPLE_IMAGES = (
    ("image", "pfm"),
    ("target_image", "pfm"),
    ("texture", "pfm"),
    ("lighting", "pfm"),
    ("target_lighting", "pfm"),
    ("proxy", "pfm"),
    ("target_proxy", "pfm"),
    ("depth", "pfm"),
    ("target_depth", "pfm"),
    ("shadow_gt", "pfm"),
    ("object_mask", "png"),
    ("receiver_mask", "png"),
)


class DatasetError(ValueError):
    pass


@dataclass
class ShadowGTConfig:
    alpha: float = 0.05  # soft-threshold width in normalized lighting units
    # Metric-mask cut. 0.9 keeps pixels at least ~2.2*alpha below the
    # receiver median; a 0.5 cut would flag every below-median pixel, which
    # under Monte Carlo render noise is half the receiver rather than a
    # shadow set.
    binarize_threshold: float = 0.9

    def __post_init__(self):
        if self.alpha <= 0:
            raise DatasetError("shadow alpha must be positive")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise DatasetError("binarize_threshold must lie in (0, 1)")


@dataclass
class AugmentConfig:
    enabled: bool = True
    hue_max: float = 0.05  # texture hue shift, in turns
    sat_range: tuple = (0.7, 1.3)
    val_range: tuple = (0.6, 1.6)
    light_tint_max: float = 0.3  # lighting tint saturation
    light_val_range: tuple = (0.6, 1.6)


@dataclass
class NormalizationRecord:
    lighting_scale: tuple
    proxy_scale: tuple
    input_scale: tuple

    def __post_init__(self):
        for name in ("lighting_scale", "proxy_scale", "input_scale"):
            if any(v <= 0 for v in getattr(self, name)):
                raise DatasetError(f"{name} must be positive")


@dataclass
class TrainingSample:
    scene_id: str
    seed: int
    image: ImageBuffer  # composed input
    target_image: ImageBuffer  # composed ground-truth removal result
    texture: ImageBuffer  # ground-plane reflectance
    lighting: ImageBuffer  # normalized receiver lighting, full scene
    target_lighting: ImageBuffer  # normalized, central object removed
    proxy: ImageBuffer  # normalized proxy render, full
    target_proxy: ImageBuffer  # normalized proxy render, removed
    depth: ImageBuffer
    target_depth: ImageBuffer
    shadow_gt: MaskImage  # soft shadow ground truth on the receiver
    object_mask: MaskImage
    receiver_mask: MaskImage
    normalization: NormalizationRecord

    @property
    def combined_mask(self) -> MaskImage:
        return MaskImage(self.object_mask.data + self.receiver_mask.data)


@dataclass
class DatasetBuildConfig:
    scenegen: SceneGenConfig = None
    render: RenderConfig = None
    depth_noise: DepthNoiseConfig = None
    perturb: LightingPerturbConfig = None
    shadow: ShadowGTConfig = None
    augment: AugmentConfig = None

    def __post_init__(self):
        self.scenegen = self.scenegen or SceneGenConfig()
        self.render = self.render or RenderConfig()
        self.depth_noise = self.depth_noise or DepthNoiseConfig()
        self.perturb = self.perturb or LightingPerturbConfig()
        self.shadow = self.shadow or ShadowGTConfig()
        self.augment = self.augment or AugmentConfig()


# ---------------------------------------------------------------------------
# Masks and composition


def compute_masks(depth: ImageBuffer, depth_removed: ImageBuffer,
                  depth_plane: ImageBuffer) -> tuple:
    """(object_mask, receiver_mask, combined_mask) from the three depths.

    The object mask marks pixels whose depth changes when the object is
    deleted (removal reveals strictly farther surfaces). The receiver mask
    marks pixels where the plane-only depth is finite and matches the full
    depth. The two are disjoint by construction.
    """
    shapes = {depth.data.shape, depth_removed.data.shape, depth_plane.data.shape}
    if len(shapes) != 1:
        raise DatasetError("depth shape mismatch")
    d = depth.data[:, :, 0]
    dr = depth_removed.data[:, :, 0]
    dp = depth_plane.data[:, :, 0]
    object_mask = (dr > d).astype(np.float32)
    with np.errstate(invalid="ignore"):  # inf - inf compares False, as intended
        receiver = np.isfinite(dp) & (np.abs(dp - d) <= RECEIVER_DEPTH_TOL * dp)
    receiver_mask = receiver.astype(np.float32)
    if (object_mask * receiver_mask).any():
        raise DatasetError("object and receiver masks overlap")
    return (MaskImage(object_mask), MaskImage(receiver_mask),
            MaskImage(object_mask + receiver_mask))


def compose_images(texture: ImageBuffer, lighting: ImageBuffer,
                   target_lighting: ImageBuffer, receiver_mask: MaskImage,
                   combined_mask: MaskImage) -> tuple:
    """image = (M_r * texture + (1 - M_r)) * lighting, and the target uses
    the combined post-removal mask with the removed-scene lighting."""
    mr = receiver_mask.data[:, :, None]
    mc = combined_mask.data[:, :, None]
    image = (mr * texture.data + (1.0 - mr)) * lighting.data
    target = (mc * texture.data + (1.0 - mc)) * target_lighting.data
    return ImageBuffer(image), ImageBuffer(target)


# ---------------------------------------------------------------------------
# HSV augmentation


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV for non-negative HDR values (V unbounded)."""
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    h = np.zeros_like(maxc)
    safe = delta > 0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    d = np.where(safe, delta, 1.0)
    h = np.where(safe & (maxc == r), ((g - b) / d) % 6.0, h)
    h = np.where(safe & (maxc == g) & (maxc != r), (b - r) / d + 2.0, h)
    h = np.where(safe & (maxc == b) & (maxc != r) & (maxc != g), (r - g) / d + 4.0, h)
    return np.stack([h / 6.0, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h = (hsv[..., 0] % 1.0) * 6.0
    s = hsv[..., 1]
    v = hsv[..., 2]
    i = np.floor(h)
    f = h - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _jitter_texture(tex: np.ndarray, rng: np.random.Generator,
                    cfg: AugmentConfig) -> np.ndarray:
    hsv = rgb_to_hsv(tex.astype(np.float64))
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue_max, cfg.hue_max)) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*cfg.sat_range), 0.0, 1.0)
    hsv[..., 2] = hsv[..., 2] * rng.uniform(*cfg.val_range)
    return np.maximum(hsv_to_rgb(hsv), 1e-4).astype(np.float32)


def _lighting_gain(rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Per-channel gain: a light-color change (hue/sat tint plus brightness).
    A diagonal transform keeps the two lighting images' ratio invariant."""
    hue = rng.uniform(0.0, 1.0)
    sat = rng.uniform(0.0, cfg.light_tint_max)
    val = rng.uniform(*cfg.light_val_range)
    return hsv_to_rgb(np.array([hue, sat, val]))


def augment(texture: ImageBuffer, lighting: ImageBuffer, target_lighting: ImageBuffer,
            rng: np.random.Generator, cfg: AugmentConfig) -> tuple:
    """Independent texture jitter and joint lighting gain. Runs before
    composition; masks and depths are untouched."""
    if not cfg.enabled:
        return texture, lighting, target_lighting
    tex = ImageBuffer(_jitter_texture(texture.data, rng, cfg))
    gain = _lighting_gain(rng, cfg).astype(np.float32)
    lit = ImageBuffer(lighting.data * gain)
    lit_t = ImageBuffer(target_lighting.data * gain)
    return tex, lit, lit_t


# ---------------------------------------------------------------------------
# Shadow ground truth and normalization


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def compute_shadow_gt(lighting_norm: ImageBuffer, receiver_mask: MaskImage,
                      cfg: ShadowGTConfig) -> MaskImage:
    """Soft shadow mask: a pixel is shadowed to the degree any channel falls
    below that channel's median over the receiver. Zero off-receiver."""
    mr = receiver_mask.data > 0.5
    if not mr.any():
        raise DatasetError("empty receiver")
    med = channelwise_median(lighting_norm, receiver_mask)
    z = (med[None, None, :] - lighting_norm.data.astype(np.float64)) / cfg.alpha
    soft = _sigmoid(z).max(axis=2)
    out = np.where(mr, soft, 0.0).astype(np.float32)
    return MaskImage(np.clip(out, 0.0, 1.0))


def _joint_max_scale(a: ImageBuffer, b: ImageBuffer, mask: MaskImage, what: str):
    sel = mask.data > 0.5
    if not sel.any():
        raise DatasetError(f"{what}: empty mask")
    joint = np.maximum(a.data[sel].max(axis=0), b.data[sel].max(axis=0))
    if (joint <= 0).any():
        raise DatasetError(f"{what}: a channel is zero everywhere on the mask")
    return (1.0 / joint).astype(np.float32)


def normalize_lighting(lighting: ImageBuffer, target_lighting: ImageBuffer,
                       combined_mask: MaskImage) -> tuple:
    """One per-channel scale so the joint max over the post-removal receiver
    equals (1,1,1) across both images."""
    scale = _joint_max_scale(lighting, target_lighting, combined_mask, "lighting")
    return (ImageBuffer(lighting.data * scale), ImageBuffer(target_lighting.data * scale),
            scale)


def normalize_proxy(proxy: ImageBuffer, target_proxy: ImageBuffer,
                    combined_mask: MaskImage) -> tuple:
    """Identical contract to normalize_lighting, applied to the proxy pair.
    Runs at train and test time alike."""
    scale = _joint_max_scale(proxy, target_proxy, combined_mask, "proxy")
    return (ImageBuffer(proxy.data * scale), ImageBuffer(target_proxy.data * scale),
            scale)


def normalize_input(image: ImageBuffer, target_image: ImageBuffer,
                    receiver_mask: MaskImage) -> tuple:
    """Scales both composed images so the input's channel means over the
    receiver equal 0.5."""
    sel = receiver_mask.data > 0.5
    if not sel.any():
        raise DatasetError("input normalization: empty receiver")
    mean = image.data[sel].astype(np.float64).mean(axis=0)
    if (mean <= 0).any():
        raise DatasetError("input normalization: zero channel mean")
    scale = (0.5 / mean).astype(np.float32)
    return (ImageBuffer(image.data * scale), ImageBuffer(target_image.data * scale),
            scale)


# ---------------------------------------------------------------------------
# Assembly


def assemble_sample(scene: SceneSpec, cfg: DatasetBuildConfig,
                    scene_id: str = "scene") -> TrainingSample:
    """Renders and assembles one complete training sample.

    All stochastic stages derive their streams from the scene seed, so the
    sample is a pure function of (scene, cfg)."""
    render_cfg = RenderConfig(
        samples_per_pixel=cfg.render.samples_per_pixel,
        shadow_samples=cfg.render.shadow_samples,
        seed=derive_seed(scene.seed, 1), resolution=cfg.render.resolution)
    renders = render_scene_images(scene, render_cfg)
    object_mask, receiver_mask, combined = compute_masks(
        renders.depth, renders.depth_removed, renders.depth_plane)

    aug_rng = np.random.default_rng(derive_seed(scene.seed, 2))
    texture, lighting, target_lighting = augment(
        renders.texture, renders.lighting, renders.lighting_removed,
        aug_rng, cfg.augment)

    lighting_n, target_lighting_n, lighting_scale = normalize_lighting(
        lighting, target_lighting, combined)
    shadow_gt = compute_shadow_gt(lighting_n, receiver_mask, cfg.shadow)
    image, target_image = compose_images(texture, lighting_n, target_lighting_n,
                                         receiver_mask, combined)

    noise_cfg = DepthNoiseConfig(sigma0=cfg.depth_noise.sigma0,
                                 sigma1=cfg.depth_noise.sigma1,
                                 seed=derive_seed(scene.seed, 3))
    proxies = build_proxy_mesh(renders.depth, scene.camera, noise_cfg,
                               scene.plane, object_mask)
    perturb_rng = np.random.default_rng(derive_seed(scene.seed, 4))
    perturbed = perturb_lighting(scene.lighting, perturb_rng, cfg.perturb)
    proxy, target_proxy = render_proxy_pair(proxies, perturbed, scene.camera,
                                            render_cfg)
    proxy_n, target_proxy_n, proxy_scale = normalize_proxy(proxy, target_proxy,
                                                           combined)

    _, _, input_scale = normalize_input(image, target_image, receiver_mask)

    record = NormalizationRecord(
        lighting_scale=tuple(float(v) for v in lighting_scale),
        proxy_scale=tuple(float(v) for v in proxy_scale),
        input_scale=tuple(float(v) for v in input_scale))
    return TrainingSample(
        scene_id=scene_id, seed=scene.seed,
        image=image, target_image=target_image, texture=texture,
        lighting=lighting_n, target_lighting=target_lighting_n,
        proxy=proxy_n, target_proxy=target_proxy_n,
        depth=renders.depth, target_depth=renders.depth_removed,
        shadow_gt=MaskImage(shadow_gt.data), object_mask=object_mask,
        receiver_mask=receiver_mask, normalization=record)


# ---------------------------------------------------------------------------
# Persistence


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_sample(directory, sample: TrainingSample, scene: SceneSpec = None,
                 cfg_hash: str = "") -> None:
    os.makedirs(directory, exist_ok=True)
    hashes = {}
    for name, kind in SAMPLE_IMAGES:
        path = os.path.join(directory, f"{name}.{kind}")
        tmp = path + ".tmp"
        value = getattr(sample, name)
        if kind == "png":
            write_png_mask(tmp, value)
        elif name in ("depth", "target_depth"):
            write_pfm_depth(tmp, value)
        elif name == "shadow_gt":
            write_pfm(tmp, ImageBuffer(value.data[:, :, None]))
        else:
            write_pfm(tmp, value)
        os.replace(tmp, path)
        hashes[f"{name}.{kind}"] = _sha256(path)
    meta = {
        "scene_id": sample.scene_id,
        "seed": sample.seed,
        "normalization": {
            "lighting_scale": list(sample.normalization.lighting_scale),
            "proxy_scale": list(sample.normalization.proxy_scale),
            "input_scale": list(sample.normalization.input_scale),
        },
        "files": hashes,
        "config_hash": cfg_hash,
    }
    if scene is not None:
        meta["scene"] = json.loads(scene_to_json(scene))
    tmp = os.path.join(directory, "sample.json.tmp")
    with open(tmp, "w") as f:
        f.write(canonical_json(meta))
    os.replace(tmp, os.path.join(directory, "sample.json"))


def load_sample(dataset_dir, scene_id: str, verify: bool = True) -> TrainingSample:
    directory = os.path.join(dataset_dir, scene_id)
    meta_path = os.path.join(directory, "sample.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise DatasetError(f"missing sample metadata {meta_path}: {e}") from e
    images = {}
    for name, kind in SAMPLE_IMAGES:
        fname = f"{name}.{kind}"
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise DatasetError(f"{scene_id}: missing {fname}")
        if verify and meta["files"].get(fname) != _sha256(path):
            raise DatasetError(f"{scene_id}: hash mismatch for {fname}")
        try:
            if kind == "png":
                images[name] = read_png_mask(path)
            else:
                images[name] = read_pfm(path)
        except ImageError as e:
            raise DatasetError(f"{scene_id}: corrupt {fname}: {e}") from e
    norm = NormalizationRecord(
        lighting_scale=tuple(meta["normalization"]["lighting_scale"]),
        proxy_scale=tuple(meta["normalization"]["proxy_scale"]),
        input_scale=tuple(meta["normalization"]["input_scale"]))
    return TrainingSample(
        scene_id=meta["scene_id"], seed=meta["seed"],
        image=images["image"], target_image=images["target_image"],
        texture=images["texture"], lighting=images["lighting"],
        target_lighting=images["target_lighting"], proxy=images["proxy"],
        target_proxy=images["target_proxy"], depth=images["depth"],
        target_depth=images["target_depth"],
        shadow_gt=MaskImage(images["shadow_gt"].data[:, :, 0]),
        object_mask=images["object_mask"], receiver_mask=images["receiver_mask"],
        normalization=norm)


def write_manifest(dataset_dir, scene_ids: list, cfg_hash: str) -> None:
    manifest = {
        "version": 1,
        "config_hash": cfg_hash,
        "count": len(scene_ids),
        "scenes": list(scene_ids),
        "images_per_scene": [f"{n}.{k}" for n, k in SAMPLE_IMAGES],
    }
    tmp = os.path.join(dataset_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        f.write(canonical_json(manifest))
    os.replace(tmp, os.path.join(dataset_dir, "manifest.json"))


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DatasetError(f"missing manifest at {path}: {e}") from e


def build_scene(index: int, root_seed: int, cfg: DatasetBuildConfig):
    scene_seed = derive_seed(root_seed, 100, index)
    scene = generate_scene(scene_seed, cfg.scenegen)
    return scene, f"scene_{index:05d}"


def build_dataset(out_dir, count: int, root_seed: int,
                  cfg: DatasetBuildConfig, progress=None) -> list:
    """Writes `count` samples plus a manifest; returns the scene ids."""
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = config_hash(cfg)
    ids = []
    for i in range(count):
        scene, scene_id = build_scene(i, root_seed, cfg)
        sample = assemble_sample(scene, cfg, scene_id=scene_id)
        write_sample(os.path.join(out_dir, scene_id), sample, scene, cfg_hash)
        ids.append(scene_id)
        if progress:
            progress(i + 1, count)
    write_manifest(out_dir, ids, cfg_hash)
    return ids
