"""The four sub-networks and the end-to-end removal pipeline.

All four networks share one U-Net shape (stride-2 encoder, nearest-neighbor
upsampling decoder with skip connections, instance normalization, leaky
rectifier activations) and differ only in channel counts and output head:

    shadow_seg        log(I), log(P), M_r                            -> S
    decomp            log(I), log(P), S, M_r                         -> L, T
    shadow_removal    log(I), log(T), log(L), log(P), log(P'),
                      S, M_r, M_o                                    -> L'_r
    lighting_inpaint  log(L'_r), log(P'), M_o                        -> L'_o

Lighting/texture heads are linear and exponentiated, so predictions stay
positive. Texture inpainting is a pluggable non-differentiable operator
with a diffusion-fill baseline.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import normalize_input, normalize_proxy
from .imaging import LOG_FLOOR, ImageBuffer, MaskImage

CHECKPOINT_MAGIC = b"USHDCKPT"
CHECKPOINT_VERSION = 1
STATE_VERSION = "unshadow-pipeline-v1"

ROLES = ("shadow_seg", "decomp", "shadow_removal", "lighting_inpaint")
ROLE_CHANNELS = {
    "shadow_seg": (7, 1, "sigmoid"),
    "decomp": (8, 6, "linear"),
    "shadow_removal": (18, 3, "linear"),
    "lighting_inpaint": (7, 3, "linear"),
}


class ModelError(ValueError):
    pass


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class UNetConfig:
    in_channels: int
    out_channels: int
    levels: int = 3
    base_channels: int = 16
    output_activation: str = "linear"  # linear | sigmoid

    def __post_init__(self):
        if self.levels < 1:
            raise ModelError("levels must be >= 1")
        if self.output_activation not in ("linear", "sigmoid"):
            raise ModelError(f"unknown activation {self.output_activation!r}")


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, b, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        downs = []
        ch = b
        for _ in range(cfg.levels):
            downs.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(ch * 2, ch * 2, 3, padding=1),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        ups = []
        for _ in range(cfg.levels):
            ups.append(nn.Sequential(
                nn.Conv2d(ch + ch // 2, ch // 2, 3, padding=1),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(ch // 2, ch // 2, 3, padding=1),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(b, cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.cfg.levels
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ModelError(
                f"resolution {tuple(x.shape[-2:])} not divisible by 2^levels={div}")
        h = self.stem(x)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        for i, up in enumerate(self.ups):
            skip = skips[-2 - i]
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = up(torch.cat([h, skip], dim=1))
        out = self.head(h)
        if self.cfg.output_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


def _init_weights(net: nn.Module, gen: torch.Generator) -> None:
    """Fan-in-scaled uniform init, reproducible from the generator."""
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


@dataclass
class PipelineState:
    nets: dict
    configs: dict
    version: str = STATE_VERSION

    def parameters_finite(self) -> bool:
        return all(torch.isfinite(p).all().item()
                   for net in self.nets.values() for p in net.parameters())


def new_pipeline_state(levels: int = 3, base_channels: int = 16,
                       seed: int = 0) -> PipelineState:
    gen = torch.Generator().manual_seed(int(seed))
    nets, configs = {}, {}
    for role in ROLES:
        cin, cout, act = ROLE_CHANNELS[role]
        cfg = UNetConfig(in_channels=cin, out_channels=cout, levels=levels,
                         base_channels=base_channels, output_activation=act)
        net = UNet(cfg)
        _init_weights(net, gen)
        net.eval()
        nets[role] = net
        configs[role] = cfg
    return PipelineState(nets=nets, configs=configs)


# ---------------------------------------------------------------------------
# Tensor plumbing


def to_tensor(img) -> torch.Tensor:
    """HxWxC image or HxW mask -> (C,H,W) float32 tensor."""
    arr = img.data if hasattr(img, "data") else np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def to_image(t: torch.Tensor) -> ImageBuffer:
    return ImageBuffer(t.detach().cpu().numpy().transpose(1, 2, 0))


def log_t(t: torch.Tensor, floor: float = LOG_FLOOR) -> torch.Tensor:
    return torch.log(t.clamp_min(floor))


# ---------------------------------------------------------------------------
# Network stage wrappers (torch in, torch out; used by training and inference)


def run_shadow_seg(state: PipelineState, log_image, log_proxy, receiver_mask):
    x = torch.cat([log_image, log_proxy, receiver_mask], dim=0).unsqueeze(0)
    return state.nets["shadow_seg"](x)[0]


def run_decomp(state: PipelineState, log_image, log_proxy, seg, receiver_mask):
    x = torch.cat([log_image, log_proxy, seg, receiver_mask], dim=0).unsqueeze(0)
    out = torch.exp(state.nets["decomp"](x)[0])
    return out[:3], out[3:]


def run_shadow_removal(state: PipelineState, log_image, log_texture, log_lighting,
                       log_proxy, log_target_proxy, seg, receiver_mask, object_mask):
    x = torch.cat([log_image, log_texture, log_lighting, log_proxy,
                   log_target_proxy, seg, receiver_mask, object_mask],
                  dim=0).unsqueeze(0)
    return torch.exp(state.nets["shadow_removal"](x)[0])


def run_lighting_inpaint(state: PipelineState, log_lighting_removed,
                         log_target_proxy, object_mask):
    x = torch.cat([log_lighting_removed, log_target_proxy, object_mask],
                  dim=0).unsqueeze(0)
    return torch.exp(state.nets["lighting_inpaint"](x)[0])


def composite_lighting(lighting_removed: torch.Tensor, lighting_hole: torch.Tensor,
                       object_mask: torch.Tensor) -> torch.Tensor:
    """Exact selection: hole pixels from the inpaint, the rest untouched."""
    m = object_mask if object_mask.dim() == 3 else object_mask.unsqueeze(0)
    return torch.where(m > 0.5, lighting_hole, lighting_removed)


# ---------------------------------------------------------------------------
# Texture inpainting


def diffusion_inpaint(texture: np.ndarray, mask: np.ndarray,
                      max_iters: int = 20000, tol: float = 1e-6) -> np.ndarray:
    """Baseline hole fill: repeated masked neighbor averaging to convergence
    (a Jacobi solve of Laplace's equation on the hole)."""
    out = texture.astype(np.float64).copy()
    hole = mask > 0.5
    if not hole.any():
        return texture.copy()
    known = ~hole
    if known.any():
        out[hole] = out[known].mean(axis=0)
    else:
        return texture.copy()
    for _ in range(max_iters):
        padded = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
        neighbors = (padded[:-2, 1:-1] + padded[2:, 1:-1]
                     + padded[1:-1, :-2] + padded[1:-1, 2:]) / 4.0
        delta = np.abs(neighbors[hole] - out[hole]).max()
        out[hole] = neighbors[hole]
        if delta < tol:
            break
    result = texture.copy()
    result[hole] = out[hole].astype(texture.dtype)
    return result


def texture_inpaint(texture: ImageBuffer, object_mask: MaskImage,
                    op=None) -> ImageBuffer:
    """Applies the inpainting operator inside the hole; identity outside is
    enforced bitwise regardless of the operator."""
    op = op or diffusion_inpaint
    try:
        filled = op(texture.data, object_mask.data)
    except Exception as e:
        raise ModelError(f"texture inpaint operator failed: {e}") from e
    filled = np.asarray(filled, dtype=np.float32)
    if filled.shape != texture.data.shape:
        raise ModelError("inpaint operator changed the image shape")
    hole = object_mask.data > 0.5
    out = texture.data.copy()
    out[hole] = filled[hole]
    return ImageBuffer(out)


def final_composite(texture_final: ImageBuffer, lighting_final: ImageBuffer,
                    image: ImageBuffer, combined_mask: MaskImage,
                    input_scale=(1.0, 1.0, 1.0)) -> ImageBuffer:
    """Recomposes the new receiver and keeps original pixels elsewhere.

    The product T' * L' lives in the input-normalized domain; dividing by
    the input scale returns it to display space, while pixels outside the
    post-removal receiver are taken from the original image bit-exactly.
    """
    scale = np.asarray(input_scale, dtype=np.float32)
    recomposed = texture_final.data * lighting_final.data / scale
    sel = (combined_mask.data > 0.5)[:, :, None]
    return ImageBuffer(np.where(sel, recomposed, image.data))


# ---------------------------------------------------------------------------
# Full pipeline


def run_pipeline(image: ImageBuffer, proxy: ImageBuffer, target_proxy: ImageBuffer,
                 object_mask: MaskImage, receiver_mask: MaskImage,
                 state: PipelineState, inpaint_op=None) -> tuple:
    """Normalization, the four networks, texture inpainting, and the final
    composite. Returns (output image, dict of intermediates)."""
    shapes = {image.data.shape[:2], proxy.data.shape[:2], target_proxy.data.shape[:2],
              object_mask.data.shape, receiver_mask.data.shape}
    if len(shapes) != 1:
        raise ModelError(f"pipeline inputs disagree on resolution: {sorted(shapes)}")
    for name, m in (("object_mask", object_mask), ("receiver_mask", receiver_mask)):
        if not m.is_binary():
            raise ModelError(f"{name} must be binary")
    combined = MaskImage(np.minimum(object_mask.data + receiver_mask.data, 1.0))

    def stage(name, fn):
        try:
            return fn()
        except Exception as e:
            raise PipelineStageError(name, e) from e

    image_n, _, input_scale = stage(
        "normalize-input", lambda: normalize_input(image, image, receiver_mask))
    proxy_n, target_proxy_n, _ = stage(
        "normalize-proxy", lambda: normalize_proxy(proxy, target_proxy, combined))

    t_image = log_t(to_tensor(image_n))
    t_proxy = log_t(to_tensor(proxy_n))
    t_target_proxy = log_t(to_tensor(target_proxy_n))
    t_mr = to_tensor(receiver_mask)
    t_mo = to_tensor(object_mask)

    with torch.no_grad():
        seg = stage("shadow-seg", lambda: run_shadow_seg(state, t_image, t_proxy, t_mr))
        lighting, texture = stage("decomp", lambda: run_decomp(
            state, t_image, t_proxy, seg, t_mr))
        lighting_removed = stage("shadow-removal", lambda: run_shadow_removal(
            state, t_image, log_t(texture), log_t(lighting), t_proxy,
            t_target_proxy, seg, t_mr, t_mo))
        lighting_hole = stage("lighting-inpaint", lambda: run_lighting_inpaint(
            state, log_t(lighting_removed), t_target_proxy, t_mo))
        lighting_final = composite_lighting(lighting_removed, lighting_hole, t_mo)

    texture_img = to_image(texture)
    texture_final = stage("texture-inpaint",
                          lambda: texture_inpaint(texture_img, object_mask, inpaint_op))
    output = stage("composite", lambda: final_composite(
        texture_final, to_image(lighting_final), image, combined, input_scale))

    intermediates = {
        "seg": MaskImage(np.clip(seg[0].numpy(), 0.0, 1.0)),
        "lighting": to_image(lighting),
        "texture": texture_img,
        "lighting_removed": to_image(lighting_removed),
        "lighting_hole": to_image(lighting_hole),
        "lighting_final": to_image(lighting_final),
        "texture_final": texture_final,
        "input_scale": input_scale,
    }
    return output, intermediates


# ---------------------------------------------------------------------------
# Checkpoint container: header JSON + named float32 tensors


def _state_tensors(state: PipelineState) -> dict:
    out = {}
    for role, net in state.nets.items():
        for name, p in net.state_dict().items():
            out[f"net.{role}.{name}"] = p.detach().cpu().numpy().astype(np.float32)
    return out


def save_checkpoint(path, state: PipelineState, meta: dict = None,
                    extra_tensors: dict = None) -> None:
    if not state.parameters_finite():
        raise ModelError("refusing to save non-finite parameters")
    tensors = dict(_state_tensors(state))
    if extra_tensors:
        tensors.update({k: np.asarray(v, dtype=np.float32) for k, v in extra_tensors.items()})
    header = {
        "version": state.version,
        "configs": {role: {
            "in_channels": cfg.in_channels, "out_channels": cfg.out_channels,
            "levels": cfg.levels, "base_channels": cfg.base_channels,
            "output_activation": cfg.output_activation,
        } for role, cfg in state.configs.items()},
        "meta": meta or {},
        "tensor_names": sorted(tensors),
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hjson)))
    buf.write(hjson)
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple:
    """Returns (PipelineState, meta dict, extra tensors dict)."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        (fmt,) = struct.unpack("<I", f.read(4))
        if fmt != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {fmt}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors = {}
        for _ in header["tensor_names"]:
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = data.copy()

    nets, configs = {}, {}
    for role in ROLES:
        c = header["configs"][role]
        cfg = UNetConfig(**c)
        net = UNet(cfg)
        sd = {}
        prefix = f"net.{role}."
        for name, arr in tensors.items():
            if name.startswith(prefix):
                sd[name[len(prefix):]] = torch.from_numpy(arr.copy())
        net.load_state_dict(sd)
        net.eval()
        nets[role] = net
        configs[role] = cfg
    extra = {k: v for k, v in tensors.items() if not k.startswith("net.")}
    state = PipelineState(nets=nets, configs=configs, version=header["version"])
    if not state.parameters_finite():
        raise ModelError(f"{path}: checkpoint contains non-finite parameters")
    return state, header["meta"], extra
