"""Median-split bounding volume hierarchy over triangle soups.

Built in numpy (deterministic), traversed inside the numba kernels. Nodes
are stored as flat arrays; leaves reference a permutation of triangle
indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import TriangleMesh

LEAF_SIZE = 4


@dataclass
class FlatBVH:
    node_lo: np.ndarray  # (N,3) float64
    node_hi: np.ndarray
    node_left: np.ndarray  # (N,) int32, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # leaf triangle range into tri_order
    node_count: np.ndarray
    tri_order: np.ndarray  # (M,) int32
    # triangle data, pre-split for Moller-Trumbore
    tri_v0: np.ndarray  # (M,3) float64
    tri_e1: np.ndarray
    tri_e2: np.ndarray
    tri_albedo: np.ndarray  # (M,3) float32
    tri_textured: np.ndarray  # (M,) uint8


def build_bvh(mesh: TriangleMesh) -> FlatBVH:
    v = mesh.vertices
    t = mesh.triangles
    if len(t) == 0:
        # Degenerate empty scene: a single empty leaf that never intersects.
        z3 = np.zeros((1, 3))
        return FlatBVH(z3, z3, np.full(1, -1, np.int32), np.full(1, -1, np.int32),
                       np.zeros(1, np.int32), np.zeros(1, np.int32),
                       np.zeros(0, np.int32), np.zeros((0, 3)), np.zeros((0, 3)),
                       np.zeros((0, 3)), np.zeros((0, 3), np.float32),
                       np.zeros(0, np.uint8))
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    tmin = np.minimum(np.minimum(p0, p1), p2)
    tmax = np.maximum(np.maximum(p0, p1), p2)
    cent = (tmin + tmax) * 0.5

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order: list[int] = []
    # Iterative build; stack holds (triangle ids, parent slot to patch).
    stack = [(np.arange(len(t)), -1, False)]
    while stack:
        ids, parent, is_right = stack.pop()
        node = len(lo)
        lo.append(tmin[ids].min(axis=0))
        hi.append(tmax[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        if parent >= 0:
            if is_right:
                right[parent] = node
            else:
                left[parent] = node
        if len(ids) <= LEAF_SIZE:
            start[node] = len(order)
            count[node] = len(ids)
            order.extend(ids.tolist())
            continue
        ext = tmax[ids].max(axis=0) - tmin[ids].min(axis=0)
        axis = int(np.argmax(ext))
        key = cent[ids, axis]
        med = np.median(key)
        mask = key <= med
        if mask.all() or not mask.any():
            srt = ids[np.argsort(key, kind="stable")]
            half = len(ids) // 2
            ids_l, ids_r = srt[:half], srt[half:]
        else:
            ids_l, ids_r = ids[mask], ids[~mask]
        stack.append((ids_r, node, True))
        stack.append((ids_l, node, False))

    order_arr = np.asarray(order, dtype=np.int32)
    # Pad bounds so rays grazing a zero-thickness node (e.g. the snapped
    # ground plane) cannot be culled by slab-test rounding.
    lo_arr = np.asarray(lo)
    hi_arr = np.asarray(hi)
    pad = 1e-9 + 1e-12 * np.maximum(np.abs(lo_arr), np.abs(hi_arr))
    return FlatBVH(
        node_lo=lo_arr - pad, node_hi=hi_arr + pad,
        node_left=np.asarray(left, np.int32), node_right=np.asarray(right, np.int32),
        node_start=np.asarray(start, np.int32), node_count=np.asarray(count, np.int32),
        tri_order=order_arr,
        tri_v0=np.ascontiguousarray(p0), tri_e1=np.ascontiguousarray(p1 - p0),
        tri_e2=np.ascontiguousarray(p2 - p0),
        tri_albedo=np.ascontiguousarray(mesh.face_albedo, np.float32),
        tri_textured=np.ascontiguousarray(mesh.face_textured, np.uint8),
    )
