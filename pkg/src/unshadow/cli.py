"""Command-line entry point.

Subcommands: gen-data (synthetic dataset), train (stagewise / end-to-end),
remove (run the pipeline on one capture), eval (metric reports). Every
command is deterministic given (config, seed) and records the config hash
in its outputs. Exit codes: 0 success, 1 usage error, 2 data error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .configio import ConfigError, canonical_json, config_hash, dataclass_from_dict
from .dataset import (
    AugmentConfig,
    DatasetBuildConfig,
    DatasetError,
    ShadowGTConfig,
    build_dataset,
    build_scene,
    assemble_sample,
    write_manifest,
    write_sample,
)
from .evaluate import (
    METHODS,
    EvalError,
    report_csv,
    report_text,
    run_baselines_and_report,
)
from .imaging import ImageBuffer, ImageError, MaskImage, read_pfm, read_png_mask, write_pfm, write_png_mask
from .losses import LossError, LossWeights
from .models import (
    ModelError,
    PipelineStageError,
    load_checkpoint,
    new_pipeline_state,
    run_pipeline,
    save_checkpoint,
)
from .render import DepthNoiseConfig, LightingPerturbConfig, RenderConfig, RenderError
from .scenegen import SceneGenConfig, SceneGenError
from .training import (
    STAGES,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    load_samples,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


@dataclass
class DatasetSection:
    depth_noise: DepthNoiseConfig = field(default_factory=DepthNoiseConfig)
    perturb: LightingPerturbConfig = field(default_factory=LightingPerturbConfig)
    shadow: ShadowGTConfig = field(default_factory=ShadowGTConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class ModelSection:
    levels: int = 3
    base_channels: int = 16
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 5
    lr0: float = 1e-4
    decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 4
    seed: int = 0


@dataclass
class EvalSection:
    methods: tuple = ("no-op", "inpaint", "inpaint-shadow", "pipeline")
    shadow_threshold: float = 0.5


@dataclass
class RunConfig:
    scenegen: SceneGenConfig = field(default_factory=SceneGenConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise DatasetError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    return dataclass_from_dict(RunConfig, raw)


def _dataset_build_config(cfg: RunConfig) -> DatasetBuildConfig:
    return DatasetBuildConfig(scenegen=cfg.scenegen, render=cfg.render,
                              depth_noise=cfg.dataset.depth_noise,
                              perturb=cfg.dataset.perturb,
                              shadow=cfg.dataset.shadow,
                              augment=cfg.dataset.augment)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="unshadow",
                description="object + cast-shadow removal with scene proxies")
    p.add_argument("--workdir", default=".", help="base for relative paths")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="worker process cap")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one stage or end-to-end")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to resume an interrupted run")
    t.add_argument("--init-from", help="checkpoint holding earlier stages' weights")
    t.add_argument("--limit", type=int, default=0, help="cap training scenes")

    r = sub.add_parser("remove", help="remove the masked object from an image")
    r.add_argument("--image", required=True)
    r.add_argument("--proxy", required=True)
    r.add_argument("--proxy-removed", required=True)
    r.add_argument("--mask-object", required=True)
    r.add_argument("--mask-receiver", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="metric report over a dataset")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--methods", help="comma-separated subset of: " + ", ".join(METHODS))
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int, default=0)
    return p


def _resolve(workdir, path):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(workdir, path)


def _log(args, msg):
    if args.verbose:
        print(msg, file=sys.stderr)


def _write_config_record(out_dir, cfg: RunConfig):
    os.makedirs(out_dir, exist_ok=True)
    record = {"config": json.loads(canonical_json(cfg)), "config_hash": config_hash(cfg)}
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(canonical_json(record))


# ---------------------------------------------------------------------------
# Commands


def _gen_worker(payload):
    index, root_seed, out_dir, cfg_blob = payload
    cfg = _dataset_build_config(dataclass_from_dict(RunConfig, json.loads(cfg_blob)))
    scene, scene_id = build_scene(index, root_seed, cfg)
    sample = assemble_sample(scene, cfg, scene_id=scene_id)
    write_sample(os.path.join(out_dir, scene_id), sample, scene, config_hash(cfg))
    return scene_id


def cmd_gen_data(args) -> int:
    cfg = load_run_config(_resolve(args.workdir, args.config))
    out = _resolve(args.workdir, args.out)
    build_cfg = _dataset_build_config(cfg)
    _write_config_record(out, cfg)
    if args.jobs > 1 and args.scenes > 1:
        from concurrent.futures import ProcessPoolExecutor

        blob = canonical_json(cfg)
        payloads = [(i, args.seed, out, blob) for i in range(args.scenes)]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            ids = list(pool.map(_gen_worker, payloads))
        from .configio import config_hash as chash

        write_manifest(out, ids, chash(build_cfg))
    else:
        progress = (lambda i, n: _log(args, f"scene {i}/{n}")) if args.verbose else None
        ids = build_dataset(out, args.scenes, args.seed, build_cfg, progress=progress)
    _log(args, f"wrote {len(ids)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(_resolve(args.workdir, args.config))
    data = _resolve(args.workdir, args.data)
    out = _resolve(args.workdir, args.out)
    samples = load_samples(data, limit=args.limit)
    if not samples:
        raise DatasetError(f"dataset at {data} is empty")
    tc = TrainConfig(stage=args.stage, epochs=cfg.train.epochs, lr0=cfg.train.lr0,
                     decay=cfg.train.decay, decay_every=cfg.train.decay_every,
                     batch_size=cfg.train.batch_size, seed=cfg.train.seed,
                     levels=cfg.model.levels, base_channels=cfg.model.base_channels,
                     weights=cfg.loss)
    state = None
    if args.init_from:
        state, _, _ = load_checkpoint(_resolve(args.workdir, args.init_from))
    elif not args.resume:
        state = new_pipeline_state(levels=cfg.model.levels,
                                   base_channels=cfg.model.base_channels,
                                   seed=cfg.model.seed)
    _write_config_record(out, cfg)
    state, history = train(tc, samples, state, out_dir=out,
                           resume_from=_resolve(args.workdir, args.resume),
                           log_fn=lambda row: _log(args, f"epoch {row['epoch']}: "
                                                         f"loss {row['loss']:.5f}"))
    _log(args, f"finished stage {args.stage}: checkpoint in {out}")
    return EXIT_OK


def cmd_remove(args) -> int:
    paths = {
        "image": args.image, "proxy": args.proxy,
        "proxy-removed": args.proxy_removed, "mask-object": args.mask_object,
        "mask-receiver": args.mask_receiver,
    }
    loaded = {}
    for name, p in paths.items():
        p = _resolve(args.workdir, p)
        if name.startswith("mask"):
            loaded[name] = read_png_mask(p)
        else:
            loaded[name] = read_pfm(p)
    shape = loaded["image"].data.shape[:2]
    for name, img in loaded.items():
        got = img.data.shape[:2]
        if got != shape:
            raise DatasetError(
                f"input {name!r} has resolution {got[1]}x{got[0]}, expected "
                f"{shape[1]}x{shape[0]} to match the image")
    state, _, _ = load_checkpoint(_resolve(args.workdir, args.checkpoint))
    output, inter = run_pipeline(loaded["image"], loaded["proxy"],
                                 loaded["proxy-removed"], loaded["mask-object"],
                                 loaded["mask-receiver"], state)
    out = _resolve(args.workdir, args.out)
    os.makedirs(out, exist_ok=True)
    write_pfm(os.path.join(out, "output.pfm"), output)
    for name in ("lighting", "texture", "lighting_removed", "lighting_final",
                 "texture_final"):
        write_pfm(os.path.join(out, f"{name}.pfm"), inter[name])
    write_pfm(os.path.join(out, "seg.pfm"), ImageBuffer(inter["seg"].data[:, :, None]))
    write_png_mask(os.path.join(out, "seg.png"),
                   MaskImage((inter["seg"].data > 0.5).astype(np.float32)))
    preview = np.clip(output.data, 0.0, 1.0) ** (1.0 / 2.2)
    from PIL import Image

    Image.fromarray((preview * 255).round().astype(np.uint8)).save(
        os.path.join(out, "output_preview.png"))
    _log(args, f"wrote removal outputs to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(_resolve(args.workdir, args.config))
    methods = list(cfg.eval.methods)
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        print(f"error: unknown method(s) {', '.join(unknown)}; available: "
              f"{', '.join(METHODS)}", file=sys.stderr)
        return EXIT_USAGE
    state = None
    if "pipeline" in methods:
        if not args.checkpoint:
            print("error: method 'pipeline' requires --checkpoint", file=sys.stderr)
            return EXIT_USAGE
        state, _, _ = load_checkpoint(_resolve(args.workdir, args.checkpoint))
    samples = load_samples(_resolve(args.workdir, args.data), limit=args.limit)
    if not samples:
        raise DatasetError("dataset is empty")
    reports = run_baselines_and_report(samples, methods, state,
                                       shadow_threshold=cfg.eval.shadow_threshold)
    out = _resolve(args.workdir, args.out)
    os.makedirs(out, exist_ok=True)
    _write_config_record(out, cfg)
    with open(os.path.join(out, "report.csv"), "w") as f:
        f.write(report_csv(reports))
    text = report_text(reports)
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(text)
    for rep in reports:
        per_scene = {
            m.scene_id: {"rmse": m.rmse, "shadow_rmse": m.shadow_rmse,
                         "inpaint_rmse": m.inpaint_rmse}
            for m in rep.scenes
        }
        doc = {"method": rep.method, "aggregate": rep.aggregate,
               "scenes": per_scene}
        with open(os.path.join(out, f"metrics_{rep.method}.json"), "w") as f:
            f.write(canonical_json(doc))
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train,
                "remove": cmd_remove, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except (ConfigError, LossError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ImageError, SceneGenError, EvalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (RenderError, ModelError, PipelineStageError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
