"""Metric harness: the three RMSE metrics, removal baselines, and the
real-capture preprocessing helpers (depth median filter, RANSAC receiver
plane, shadow ground truth from paired captures)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ShadowGTConfig, TrainingSample, _sigmoid
from .imaging import ImageBuffer, MaskImage
from .models import run_pipeline, texture_inpaint
from .render.core import camera_rays


class EvalError(ValueError):
    pass


METHODS = ("no-op", "inpaint", "inpaint-shadow", "pipeline")


@dataclass
class SceneMetrics:
    scene_id: str
    rmse: float
    shadow_rmse: float = None  # None when the scene has no shadow pixels
    inpaint_rmse: float = None
    # pooled accumulators for exact aggregation
    sq: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    method: str
    scenes: list
    aggregate: dict


def rmse(pred: ImageBuffer, gt: ImageBuffer, mask: MaskImage = None) -> float:
    """Root mean squared difference over masked pixels and channels."""
    if pred.data.shape != gt.data.shape:
        raise EvalError("rmse shape mismatch")
    if mask is None:
        sel = np.ones(pred.data.shape[:2], dtype=bool)
    else:
        sel = mask.data > 0.5
    if not sel.any():
        raise EvalError("rmse over an empty mask")
    diff = (pred.data[sel].astype(np.float64) - gt.data[sel].astype(np.float64))
    return float(np.sqrt(np.square(diff).mean()))


def _sq_count(pred, gt, sel):
    diff = pred.data[sel].astype(np.float64) - gt.data[sel].astype(np.float64)
    return float(np.square(diff).sum()), int(diff.size)


def binarize_shadow_mask(soft: MaskImage, threshold: float = 0.5) -> MaskImage:
    """Strict inequality: exactly-threshold pixels are not shadow."""
    return MaskImage((soft.data > threshold).astype(np.float32))


def real_shadow_gt(image: ImageBuffer, target_image: ImageBuffer,
                   receiver_mask: MaskImage, cfg: ShadowGTConfig) -> MaskImage:
    """Shadow ground truth for captured pairs: the log-ratio of the input to
    the removal target stands in for the lighting, and the same
    below-the-median soft threshold applies on the receiver."""
    if image.data.shape != target_image.data.shape:
        raise EvalError("misaligned capture pair")
    mr = receiver_mask.data > 0.5
    if not mr.any():
        raise EvalError("empty receiver")
    eps = 1e-6
    ratio = np.log((image.data.astype(np.float64) + eps)
                   / (target_image.data.astype(np.float64) + eps))
    med = np.median(ratio[mr], axis=0)
    z = (med[None, None, :] - ratio) / cfg.alpha
    soft = _sigmoid(z).max(axis=2)
    return MaskImage(np.where(mr, np.clip(soft, 0, 1), 0.0).astype(np.float32))


def median_filter_depth(depth: ImageBuffer, radius: int) -> ImageBuffer:
    """Windowed median that ignores +inf no-hit sentinels; a window of only
    sentinels stays +inf. Edges are handled by edge replication."""
    if radius < 1:
        return depth.copy()
    d = depth.data[:, :, 0].astype(np.float64)
    k = 2 * radius + 1
    padded = np.pad(d, radius, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    stack = windows.reshape(d.shape[0], d.shape[1], k * k).copy()
    stack[np.isinf(stack)] = np.nan
    with np.errstate(all="ignore"):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)
            med = np.nanmedian(stack, axis=2)
    med = np.where(np.isnan(med), np.inf, med)
    return ImageBuffer(med.astype(np.float32)[:, :, None])


def ransac_plane_fit(depth: ImageBuffer, camera, iters: int = 500,
                     inlier_tol: float = 0.0, seed: int = 0) -> tuple:
    """Best-fit plane by RANSAC over unprojected depth pixels, refit by least
    squares on the winning inliers. Returns ((normal, offset), receiver mask)
    with normal . x = offset for points x on the plane."""
    h, w = depth.height, depth.width
    origins, dirs = camera_rays(camera, h)
    d = depth.data[:, :, 0].astype(np.float64).reshape(-1)
    finite = np.isfinite(d)
    if finite.sum() < 3:
        raise EvalError("ransac needs at least 3 finite depth pixels")
    pts = origins[finite] + d[finite, None] * dirs[finite]
    if inlier_tol <= 0:
        inlier_tol = 0.01 * float(np.median(d[finite]))
    rng = np.random.default_rng(seed)
    best_count = -1
    best_normal = None
    best_point = None
    n_pts = len(pts)
    for _ in range(iters):
        idx = rng.choice(n_pts, 3, replace=False)
        p0, p1, p2 = pts[idx]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        count = int((np.abs((pts - p0) @ n) < inlier_tol).sum())
        if count > best_count:
            best_count, best_normal, best_point = count, n, p0
    if best_normal is None:
        raise EvalError("ransac found no valid plane (degenerate support)")
    inl = np.abs((pts - best_point) @ best_normal) < inlier_tol
    support = pts[inl]
    centroid = support.mean(axis=0)
    _, _, vt = np.linalg.svd(support - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[1] < 0:
        normal = -normal
    offset = float(normal @ centroid)
    final_inl = np.abs(pts @ normal - offset) < inlier_tol
    mask = np.zeros(h * w, dtype=np.float32)
    mask[np.nonzero(finite)[0][final_inl]] = 1.0
    return (normal, offset), MaskImage(mask.reshape(h, w))


# ---------------------------------------------------------------------------
# Baselines and reporting


def _extended_mask(sample: TrainingSample, threshold: float) -> MaskImage:
    shadow = binarize_shadow_mask(sample.shadow_gt, threshold)
    return MaskImage(np.minimum(sample.object_mask.data + shadow.data, 1.0))


def predict(method: str, sample: TrainingSample, state=None, inpaint_op=None,
            shadow_threshold: float = 0.5) -> ImageBuffer:
    """Removal result of one method on one sample, in display space."""
    if method == "no-op":
        return sample.image.copy()
    if method == "inpaint":
        return texture_inpaint(sample.image, sample.object_mask, inpaint_op)
    if method == "inpaint-shadow":
        return texture_inpaint(sample.image,
                               _extended_mask(sample, shadow_threshold), inpaint_op)
    if method == "pipeline":
        if state is None:
            raise EvalError("pipeline method needs a checkpoint state")
        out, _ = run_pipeline(sample.image, sample.proxy, sample.target_proxy,
                              sample.object_mask, sample.receiver_mask, state,
                              inpaint_op)
        return out
    raise EvalError(f"unknown method {method!r}; available: {', '.join(METHODS)}")


def evaluate_method(method: str, samples: list, state=None, inpaint_op=None,
                    shadow_threshold: float = 0.5) -> MetricsReport:
    scenes = []
    pooled_sq = {"rmse": 0.0, "shadow_rmse": 0.0, "inpaint_rmse": 0.0}
    pooled_n = {"rmse": 0, "shadow_rmse": 0, "inpaint_rmse": 0}
    for sample in samples:
        pred = predict(method, sample, state, inpaint_op, shadow_threshold)
        gt = sample.target_image
        full = np.ones(pred.data.shape[:2], dtype=bool)
        shadow = binarize_shadow_mask(sample.shadow_gt, shadow_threshold).data > 0.5
        hole = sample.object_mask.data > 0.5
        m = SceneMetrics(scene_id=sample.scene_id, rmse=0.0)
        for key, sel in (("rmse", full), ("shadow_rmse", shadow),
                         ("inpaint_rmse", hole)):
            if not sel.any():
                continue
            sq, n = _sq_count(pred, gt, sel)
            m.sq[key] = sq
            m.count[key] = n
            setattr(m, key, math.sqrt(sq / n))
            pooled_sq[key] += sq
            pooled_n[key] += n
        scenes.append(m)
    aggregate = {k: (math.sqrt(pooled_sq[k] / pooled_n[k]) if pooled_n[k] else None)
                 for k in pooled_sq}
    return MetricsReport(method=method, scenes=scenes, aggregate=aggregate)


def run_baselines_and_report(samples: list, methods: list, state=None,
                             inpaint_op=None, shadow_threshold: float = 0.5) -> list:
    for m in methods:
        if m not in METHODS:
            raise EvalError(f"unknown method {m!r}; available: {', '.join(METHODS)}")
    return [evaluate_method(m, samples, state, inpaint_op, shadow_threshold)
            for m in methods]


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def report_csv(reports: list) -> str:
    lines = ["method,RMSE,Shadow RMSE,Inpaint RMSE"]
    for r in reports:
        a = r.aggregate
        lines.append(f"{r.method},{_fmt(a['rmse'])},{_fmt(a['shadow_rmse'])},"
                     f"{_fmt(a['inpaint_rmse'])}")
    return "\n".join(lines) + "\n"


def report_text(reports: list) -> str:
    header = f"{'method':<16} {'RMSE':>10} {'Shadow RMSE':>12} {'Inpaint RMSE':>13}"
    rows = [header, "-" * len(header)]
    for r in reports:
        a = r.aggregate
        rows.append(f"{r.method:<16} {_fmt(a['rmse']):>10} "
                    f"{_fmt(a['shadow_rmse']):>12} {_fmt(a['inpaint_rmse']):>13}")
    return "\n".join(rows) + "\n"
