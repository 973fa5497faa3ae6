"""Training objectives for the four sub-networks.

Masking conventions (all exact: perturbing a prediction pixel outside a
loss's mask can never change its value):

- pyramid/recomposition terms premultiply their inputs by the mask;
- gradient-based terms (segmentation gradients, the sparse lighting prior,
  the exclusion loss) instead weight each gradient entry by whether both
  pixels of the difference lie inside the mask, so a constant image has
  exactly zero gradient loss regardless of the mask shape;
- the class-balanced cross entropy weights its sums by the mask.

Losses take single instances as (C,H,W) tensors with (H,W) masks; batches
average per-element values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

LOG_EPS = 1e-6
PYRAMID_LEVELS = 4

_BLUR = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    seg: float = 1.0  # class-balanced BCE on the shadow segmentation
    seg_grad: float = 10.0  # segmentation gradient agreement
    decomp: float = 1.0  # pyramid data term on predicted lighting + texture
    excl: float = 0.01  # coincident-edge exclusion between texture/lighting
    recompose: float = 1.0  # |input - lighting * texture| on the receiver
    light_smooth: float = 0.1  # sparse gradient prior on the lighting
    target_light: float = 1.0  # pyramid terms after removal + hole fill
    target_recompose: float = 1.0  # |target - composite| on the new receiver

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise LossError(f"loss weight {f.name} must be >= 0")


def _as_chw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 3:
        raise LossError(f"expected (C,H,W) tensor, got shape {tuple(x.shape)}")
    return x


def spatial_gradient_t(x: torch.Tensor) -> torch.Tensor:
    """Forward differences with zero last row/column; (C,H,W) -> (2C,H,W)."""
    gx = torch.zeros_like(x)
    gy = torch.zeros_like(x)
    gx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    gy[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    return torch.cat([gx, gy], dim=0)


def _gradient_weights(mask: torch.Tensor, channels: int) -> torch.Tensor:
    """(2C,H,W) weights: 1 where both pixels of the forward difference lie
    inside the mask."""
    wx = torch.zeros_like(mask)
    wy = torch.zeros_like(mask)
    wx[:, :-1] = mask[:, 1:] * mask[:, :-1]
    wy[:-1, :] = mask[1:, :] * mask[:-1, :]
    return torch.cat([wx.expand(channels, -1, -1), wy.expand(channels, -1, -1)], dim=0)


def _blur_down(x: torch.Tensor) -> torch.Tensor:
    """Binomial 5-tap blur (replicate padding) then 2x decimation."""
    c = x.shape[0]
    k = _BLUR.to(dtype=x.dtype, device=x.device)
    xb = x.unsqueeze(0)
    xb = F.pad(xb, (0, 0, 2, 2), mode="replicate")
    xb = F.conv2d(xb, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)
    xb = F.pad(xb, (2, 2, 0, 0), mode="replicate")
    xb = F.conv2d(xb, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    return xb[0, :, ::2, ::2]


def gaussian_pyramid_t(x: torch.Tensor, levels: int) -> list:
    out = [x]
    for _ in range(levels - 1):
        out.append(_blur_down(out[-1]))
    return out


def pyramid_loss(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor,
                 levels: int = PYRAMID_LEVELS) -> torch.Tensor:
    """Sum over pyramid levels of the mean squared difference of the
    mask-premultiplied images."""
    x = _as_chw(x)
    if x.shape != x_hat.shape:
        raise LossError("pyramid_loss shape mismatch")
    m = mask.unsqueeze(0)
    pa = gaussian_pyramid_t(x * m, levels)
    pb = gaussian_pyramid_t(x_hat * m, levels)
    total = x.new_zeros(())
    for a, b in zip(pa, pb):
        total = total + (a - b).square().mean()
    return total


def exclusion_loss(texture: torch.Tensor, lighting: torch.Tensor,
                   mask: torch.Tensor = None, levels: int = 4) -> torch.Tensor:
    """Penalizes edges at the same location in the two decomposed images.

    Edge maps tanh(lambda * |grad|) are multiplied elementwise; the balance
    factors lambda are recomputed per scale from the (masked) mean gradient
    magnitudes. Scales are bilinearly downsampled by 2 and weighted 4^i.
    Masking keeps only gradient entries whose full receptive field lies
    inside the receiver.
    """
    t = _as_chw(texture)
    l = _as_chw(lighting)
    c = t.shape[0]
    m = mask if mask is not None else torch.ones_like(t[0])
    total = t.new_zeros(())
    for i in range(levels):
        if i > 0:
            t = F.avg_pool2d(t.unsqueeze(0), 2)[0]  # = bilinear 2x downsample
            l = F.avg_pool2d(l.unsqueeze(0), 2)[0]
            # exact support: a coarse pixel counts only if all fine pixels do
            m = -F.max_pool2d(-m.unsqueeze(0).unsqueeze(0), 2)[0, 0]
        w = _gradient_weights(m, c)
        wsum = w.sum()
        if wsum.item() == 0.0:
            continue
        gt = spatial_gradient_t(t).abs() * w
        gl = spatial_gradient_t(l).abs() * w
        mt = gt.sum() / wsum
        ml = gl.sum() / wsum
        if mt.item() == 0.0 or ml.item() == 0.0:
            continue
        lam_t = torch.sqrt(ml / mt)
        lam_l = torch.sqrt(mt / ml)
        psi = torch.tanh(lam_t * gt) * torch.tanh(lam_l * gl)
        s = psi.square().sum()
        if s.item() > 0.0:
            total = total + (4.0**i) * s.sqrt()
    return total


def recomposition_loss(image: torch.Tensor, lighting: torch.Tensor,
                       texture: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean |mask * (image - lighting * texture)|."""
    m = mask.unsqueeze(0)
    return (m * (image - lighting * texture)).abs().mean()


def sparse_gradient_loss(lighting: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean |grad| over gradient entries interior to the mask."""
    l = _as_chw(lighting)
    w = _gradient_weights(mask, l.shape[0])
    return (spatial_gradient_t(l).abs() * w).mean()


def shadow_seg_loss(pred: torch.Tensor, target: torch.Tensor,
                    receiver_mask: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Class-balanced BCE plus gradient agreement, over receiver pixels."""
    if receiver_mask.sum().item() == 0:
        raise LossError("shadow segmentation loss needs a non-empty receiver")
    p = pred.squeeze(0) if pred.dim() == 3 else pred
    t = target.squeeze(0) if target.dim() == 3 else target
    m = receiver_mask
    logp = torch.log(p.clamp(LOG_EPS, 1.0))
    log1p = torch.log((1.0 - p).clamp(LOG_EPS, 1.0))
    pos_w = m * t
    neg_w = m * (1.0 - t)
    e_s = (-(pos_w * logp).sum() / pos_w.sum().clamp_min(1.0)
           - (neg_w * log1p).sum() / neg_w.sum().clamp_min(1.0))
    wg = _gradient_weights(m, 1)
    gp = spatial_gradient_t(p.unsqueeze(0))
    gt = spatial_gradient_t(t.unsqueeze(0))
    e_grad = (wg * (gp - gt)).square().mean()
    return w.seg * e_s + w.seg_grad * e_grad


def intrinsic_loss(lighting: torch.Tensor, texture: torch.Tensor,
                   lighting_gt: torch.Tensor, texture_gt: torch.Tensor,
                   image: torch.Tensor, receiver_mask: torch.Tensor,
                   w: LossWeights) -> torch.Tensor:
    """Pyramid data terms + exclusion + recomposition + gradient sparsity."""
    data = (pyramid_loss(lighting, lighting_gt, receiver_mask)
            + pyramid_loss(texture, texture_gt, receiver_mask))
    return (w.decomp * data
            + w.excl * exclusion_loss(texture, lighting, receiver_mask)
            + w.recompose * recomposition_loss(image, lighting, texture, receiver_mask)
            + w.light_smooth * sparse_gradient_loss(lighting, receiver_mask))


def lighting_loss(lighting_removed: torch.Tensor, lighting_hole: torch.Tensor,
                  target_lighting: torch.Tensor, receiver_mask: torch.Tensor,
                  object_mask: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Shadow removal is penalized on receiver pixels outside the hole;
    the hole-fill network only inside it."""
    removal_mask = receiver_mask * (1.0 - object_mask)
    return w.target_light * (
        pyramid_loss(lighting_removed, target_lighting, removal_mask)
        + pyramid_loss(lighting_hole, target_lighting, object_mask))


def output_loss(target_image: torch.Tensor, lighting_final: torch.Tensor,
                texture_final: torch.Tensor, combined_mask: torch.Tensor,
                w: LossWeights) -> torch.Tensor:
    """Final recomposition against the ground-truth removal result."""
    return w.target_recompose * recomposition_loss(
        target_image, lighting_final, texture_final, combined_mask)
