"""Training: independent stagewise pretraining with ground-truth
intermediates, then end-to-end fine-tuning.

Determinism contract: a fixed (seed, config, dataset) reproduces parameter
trajectories bit-exactly, and resuming from a checkpoint matches the
uninterrupted run. Batch order comes from a serializable PCG64 stream;
initialization and optimizer state are fully captured in checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import TrainingSample, load_manifest, load_sample
from .losses import (
    LossWeights,
    intrinsic_loss,
    lighting_loss,
    output_loss,
    shadow_seg_loss,
)
from .models import (
    PipelineState,
    composite_lighting,
    load_checkpoint,
    log_t,
    new_pipeline_state,
    run_decomp,
    run_lighting_inpaint,
    run_pipeline,
    run_shadow_removal,
    run_shadow_seg,
    save_checkpoint,
    texture_inpaint,
    to_tensor,
)

STAGES = ("ss", "id", "sr", "li", "end2end")
STAGE_ROLE = {"ss": "shadow_seg", "id": "decomp", "sr": "shadow_removal",
              "li": "lighting_inpaint"}


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    stage: str = "end2end"
    epochs: int = 5
    lr0: float = 1e-4
    decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 4
    seed: int = 0
    levels: int = 3
    base_channels: int = 16
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.lr0 <= 0:
            raise TrainingError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise TrainingError("decay must lie in (0, 1]")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** math.floor(epoch / cfg.decay_every)


# ---------------------------------------------------------------------------
# Sample preparation


def prepare_sample(sample: TrainingSample) -> dict:
    """Tensors for one sample, in the networks' input domain.

    The input scale is applied to the composed images and, for gauge
    consistency with the normalized lighting targets, to the texture
    target as well: then (input_scale*texture) * lighting equals the scaled
    input exactly on the receiver.
    """
    s = torch.tensor(sample.normalization.input_scale,
                     dtype=torch.float32).view(3, 1, 1)
    image = to_tensor(sample.image) * s
    target_image = to_tensor(sample.target_image) * s
    texture = to_tensor(sample.texture) * s
    return {
        "image": image,
        "target_image": target_image,
        "texture": texture,
        "lighting": to_tensor(sample.lighting),
        "target_lighting": to_tensor(sample.target_lighting),
        "proxy": to_tensor(sample.proxy),
        "target_proxy": to_tensor(sample.target_proxy),
        "shadow_gt": to_tensor(sample.shadow_gt)[0],
        "receiver_mask": to_tensor(sample.receiver_mask),
        "object_mask": to_tensor(sample.object_mask),
        "combined_mask": to_tensor(sample.object_mask) + to_tensor(sample.receiver_mask),
    }


def load_samples(dataset_dir, limit: int = 0, offset: int = 0) -> list:
    manifest = load_manifest(dataset_dir)
    ids = manifest["scenes"][offset:]
    if limit:
        ids = ids[:limit]
    return [load_sample(dataset_dir, sid) for sid in ids]


# ---------------------------------------------------------------------------
# Per-stage losses


def stage_loss(state: PipelineState, t: dict, stage: str, w: LossWeights,
               inpaint_op=None) -> torch.Tensor:
    log_i = log_t(t["image"])
    log_p = log_t(t["proxy"])
    log_tp = log_t(t["target_proxy"])
    mr = t["receiver_mask"]
    mo = t["object_mask"]
    seg_gt = t["shadow_gt"]

    if stage == "ss":
        seg = run_shadow_seg(state, log_i, log_p, mr)
        return shadow_seg_loss(seg[0], seg_gt, mr[0], w)
    if stage == "id":
        lighting, texture = run_decomp(state, log_i, log_p,
                                       seg_gt.unsqueeze(0), mr)
        return intrinsic_loss(lighting, texture, t["lighting"], t["texture"],
                              t["image"], mr[0], w)
    if stage == "sr":
        removed = run_shadow_removal(state, log_i, log_t(t["texture"]),
                                     log_t(t["lighting"]), log_p, log_tp,
                                     seg_gt.unsqueeze(0), mr, mo)
        # ground-truth hole fill makes the inpaint term exactly zero
        return lighting_loss(removed, t["target_lighting"], t["target_lighting"],
                             mr[0], mo[0], w)
    if stage == "li":
        hole = run_lighting_inpaint(state, log_t(t["target_lighting"]), log_tp, mo)
        return lighting_loss(t["target_lighting"], hole, t["target_lighting"],
                             mr[0], mo[0], w)
    if stage == "end2end":
        seg = run_shadow_seg(state, log_i, log_p, mr)
        lighting, texture = run_decomp(state, log_i, log_p, seg, mr)
        removed = run_shadow_removal(state, log_i, log_t(texture), log_t(lighting),
                                     log_p, log_tp, seg, mr, mo)
        hole = run_lighting_inpaint(state, log_t(removed), log_tp, mo)
        final_lighting = composite_lighting(removed, hole, mo)
        # the texture inpaint is non-differentiable: constant w.r.t. the graph
        from .imaging import ImageBuffer, MaskImage

        tex_np = texture.detach().numpy().transpose(1, 2, 0)
        filled = texture_inpaint(ImageBuffer(tex_np), MaskImage(mo[0].numpy()),
                                 inpaint_op)
        final_texture = torch.where(mo > 0.5, to_tensor(filled), texture)
        return (shadow_seg_loss(seg[0], seg_gt, mr[0], w)
                + intrinsic_loss(lighting, texture, t["lighting"], t["texture"],
                                 t["image"], mr[0], w)
                + lighting_loss(removed, hole, t["target_lighting"], mr[0], mo[0], w)
                + output_loss(t["target_image"], final_lighting, final_texture,
                              t["combined_mask"][0], w))
    raise TrainingError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# Optimizer state packing


def _trained_params(state: PipelineState, stage: str) -> list:
    if stage == "end2end":
        roles = list(STAGE_ROLE.values())
    else:
        roles = [STAGE_ROLE[stage]]
    named = []
    for role in roles:
        for name, p in sorted(state.nets[role].named_parameters()):
            named.append((f"{role}.{name}", p))
    return named


def _pack_optimizer(opt: torch.optim.Adam, names: list) -> dict:
    out = {}
    for idx, (name, _) in enumerate(names):
        st = opt.state_dict()["state"].get(idx)
        if st is None:
            continue
        out[f"opt.{name}.step"] = np.asarray([float(st["step"])], dtype=np.float32)
        out[f"opt.{name}.exp_avg"] = st["exp_avg"].numpy()
        out[f"opt.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
    return out


def _unpack_optimizer(opt: torch.optim.Adam, names: list, tensors: dict) -> None:
    sd = opt.state_dict()
    for idx, (name, p) in enumerate(names):
        key = f"opt.{name}.step"
        if key not in tensors:
            continue
        sd["state"][idx] = {
            "step": torch.tensor(float(tensors[key][0])),
            "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"].copy()),
        }
    opt.load_state_dict(sd)


# ---------------------------------------------------------------------------
# The training loop


def train(cfg: TrainConfig, samples: list, state: PipelineState = None,
          out_dir=None, resume_from=None, inpaint_op=None, log_fn=None) -> tuple:
    """Trains one stage (or end-to-end); returns (state, epoch history).

    history rows: {"epoch", "lr", "loss"}. If out_dir is set, writes
    checkpoint.bin after every epoch plus metrics.csv.
    """
    if not samples:
        raise TrainingError("no training samples")
    torch.use_deterministic_algorithms(True)

    start_epoch = 0
    rng_state = None
    if resume_from:
        state, meta, extra = load_checkpoint(resume_from)
        if meta.get("stage") != cfg.stage:
            raise TrainingError(
                f"checkpoint stage {meta.get('stage')!r} != config stage {cfg.stage!r}")
        start_epoch = int(meta["epoch"]) + 1
        rng_state = meta["rng_state"]
    elif state is None:
        state = new_pipeline_state(levels=cfg.levels, base_channels=cfg.base_channels,
                                   seed=cfg.seed)

    prepared = [prepare_sample(s) if isinstance(s, TrainingSample) else s
                for s in samples]
    for net in state.nets.values():
        net.train()

    names = _trained_params(state, cfg.stage)
    opt = torch.optim.Adam([p for _, p in names], lr=cfg.lr0,
                           betas=(0.9, 0.999))
    order_rng = np.random.default_rng(cfg.seed)
    if rng_state is not None:
        order_rng.bit_generator.state = json.loads(rng_state)
    if resume_from:
        _unpack_optimizer(opt, names, extra)

    history = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(len(prepared))
        epoch_loss = 0.0
        nbatches = 0
        for b0 in range(0, len(perm), cfg.batch_size):
            batch = perm[b0:b0 + cfg.batch_size]
            opt.zero_grad()
            total = None
            for i in batch:
                loss = stage_loss(state, prepared[i], cfg.stage, cfg.weights,
                                  inpaint_op)
                total = loss if total is None else total + loss
            total = total / len(batch)
            if not torch.isfinite(total):
                ckpt = None
                if out_dir:
                    ckpt = os.path.join(out_dir, "diverged.bin")
                    _save_train_checkpoint(ckpt, state, cfg, epoch, order_rng, opt,
                                           names)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", checkpoint_path=ckpt)
            total.backward()
            opt.step()
            epoch_loss += total.item()
            nbatches += 1
        mean_loss = epoch_loss / max(nbatches, 1)
        history.append({"epoch": epoch, "lr": lr, "loss": mean_loss})
        if log_fn:
            log_fn(history[-1])
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            _save_train_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                                   state, cfg, epoch, order_rng, opt, names)
            _append_metrics(os.path.join(out_dir, "metrics.csv"), cfg.stage,
                            history[-1], fresh=(epoch == start_epoch and not resume_from))

    for net in state.nets.values():
        net.eval()
    return state, history


def _save_train_checkpoint(path, state, cfg, epoch, order_rng, opt, names):
    meta = {
        "stage": cfg.stage,
        "epoch": epoch,
        "rng_state": json.dumps(order_rng.bit_generator.state),
        "train_config": {
            "stage": cfg.stage, "epochs": cfg.epochs, "lr0": cfg.lr0,
            "decay": cfg.decay, "decay_every": cfg.decay_every,
            "batch_size": cfg.batch_size, "seed": cfg.seed,
            "levels": cfg.levels, "base_channels": cfg.base_channels,
        },
    }
    save_checkpoint(path, state, meta=meta, extra_tensors=_pack_optimizer(opt, names))


def _append_metrics(path, stage, row, fresh=False):
    new = fresh or not os.path.exists(path)
    with open(path, "a" if not new else "w") as f:
        if new:
            f.write("stage,epoch,lr,loss\n")
        f.write(f"{stage},{row['epoch']},{row['lr']:.8g},{row['loss']:.8g}\n")


def train_stage(cfg: TrainConfig, samples: list, state: PipelineState = None,
                **kw) -> tuple:
    """Stagewise pretraining: only the selected subnetwork's parameters
    change; ground-truth intermediates feed the downstream inputs."""
    if cfg.stage == "end2end":
        raise TrainingError("train_stage is for the four pretraining stages")
    return train(cfg, samples, state, **kw)


def train_end_to_end(cfg: TrainConfig, samples: list, state: PipelineState,
                     **kw) -> tuple:
    """Fine-tunes all four networks jointly; the texture inpainting operator
    stays outside the gradient path."""
    if cfg.stage != "end2end":
        raise TrainingError("config stage must be 'end2end'")
    if state is None:
        raise TrainingError("end-to-end training needs a pretrained or "
                            "explicitly initialized state")
    return train(cfg, samples, state, **kw)
