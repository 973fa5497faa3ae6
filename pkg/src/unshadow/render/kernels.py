"""Numba kernels: BVH traversal and direct-lighting shading.

All geometry math runs in float64; radiance accumulates in float64 and is
stored as float32. Pixels are independent, so the parallel loop is
bit-identical to a serial one.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

RAY_EPS = 1e-9
SHADOW_EPS = 1e-6
# Barycentric slack: rays through shared edges/vertices must hit at least
# one of the adjacent triangles regardless of rounding.
BARY_EPS = 1e-12


@njit(cache=True, inline="always")
def _ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, tmin, tmax):
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if -1e-14 < det < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return -1.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return -1.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= tmin or t > tmax:
        return -1.0
    return t


@njit(cache=True)
def _bvh_closest(ox, oy, oz, dx, dy, dz,
                 node_lo, node_hi, node_left, node_right, node_start, node_count,
                 tri_order, tri_v0, tri_e1, tri_e2, tmin, tmax):
    """Returns (t, triangle index) of the closest hit, or (inf, -1)."""
    best = np.inf
    hit = -1
    if tri_v0.shape[0] == 0:
        return best, hit
    inv_x = 1.0 / dx if dx != 0.0 else np.inf
    inv_y = 1.0 / dy if dy != 0.0 else np.inf
    inv_z = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(64, np.int64)
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        # slab test
        t0 = (node_lo[n, 0] - ox) * inv_x
        t1 = (node_hi[n, 0] - ox) * inv_x
        if t0 > t1:
            t0, t1 = t1, t0
        s0 = (node_lo[n, 1] - oy) * inv_y
        s1 = (node_hi[n, 1] - oy) * inv_y
        if s0 > s1:
            s0, s1 = s1, s0
        if s0 > t0:
            t0 = s0
        if s1 < t1:
            t1 = s1
        s0 = (node_lo[n, 2] - oz) * inv_z
        s1 = (node_hi[n, 2] - oz) * inv_z
        if s0 > s1:
            s0, s1 = s1, s0
        if s0 > t0:
            t0 = s0
        if s1 < t1:
            t1 = s1
        limit = best if best < tmax else tmax
        if t1 < t0 or t0 > limit or t1 < tmin:
            continue
        if node_count[n] > 0:
            for k in range(node_start[n], node_start[n] + node_count[n]):
                ti = tri_order[k]
                t = _ray_triangle(ox, oy, oz, dx, dy, dz,
                                  tri_v0[ti], tri_e1[ti], tri_e2[ti], tmin, limit)
                if t > 0.0 and (t < best or (t == best and (hit < 0 or ti < hit))):
                    # equal-t ties (rays through shared vertices/edges) break
                    # by triangle index, independent of traversal order
                    best = t
                    hit = ti
        else:
            stack[sp] = node_left[n]
            sp += 1
            stack[sp] = node_right[n]
            sp += 1
    return best, hit


@njit(cache=True)
def _bvh_occluded(ox, oy, oz, dx, dy, dz,
                  node_lo, node_hi, node_left, node_right, node_start, node_count,
                  tri_order, tri_v0, tri_e1, tri_e2, tmin, tmax):
    if tri_v0.shape[0] == 0:
        return False
    inv_x = 1.0 / dx if dx != 0.0 else np.inf
    inv_y = 1.0 / dy if dy != 0.0 else np.inf
    inv_z = 1.0 / dz if dz != 0.0 else np.inf
    stack = np.empty(64, np.int64)
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        t0 = (node_lo[n, 0] - ox) * inv_x
        t1 = (node_hi[n, 0] - ox) * inv_x
        if t0 > t1:
            t0, t1 = t1, t0
        s0 = (node_lo[n, 1] - oy) * inv_y
        s1 = (node_hi[n, 1] - oy) * inv_y
        if s0 > s1:
            s0, s1 = s1, s0
        if s0 > t0:
            t0 = s0
        if s1 < t1:
            t1 = s1
        s0 = (node_lo[n, 2] - oz) * inv_z
        s1 = (node_hi[n, 2] - oz) * inv_z
        if s0 > s1:
            s0, s1 = s1, s0
        if s0 > t0:
            t0 = s0
        if s1 < t1:
            t1 = s1
        if t1 < t0 or t0 > tmax or t1 < tmin:
            continue
        if node_count[n] > 0:
            for k in range(node_start[n], node_start[n] + node_count[n]):
                ti = tri_order[k]
                t = _ray_triangle(ox, oy, oz, dx, dy, dz,
                                  tri_v0[ti], tri_e1[ti], tri_e2[ti], tmin, tmax)
                if t > 0.0:
                    return True
        else:
            stack[sp] = node_left[n]
            sp += 1
            stack[sp] = node_right[n]
            sp += 1
    return False


@njit(cache=True, inline="always")
def _env_radiance(env, env_yaw, dx, dy, dz, out):
    """Nearest-texel equirect lookup; yaw rotates the map around +y."""
    h = env.shape[0]
    w = env.shape[1]
    cy = dy
    if cy > 1.0:
        cy = 1.0
    if cy < -1.0:
        cy = -1.0
    theta = np.arccos(cy)
    phi = np.arctan2(dz, dx) - env_yaw
    u = phi / (2.0 * np.pi)
    u = u - np.floor(u)
    v = theta / np.pi
    x = int(u * w)
    if x >= w:
        x = w - 1
    y = int(v * h)
    if y >= h:
        y = h - 1
    out[0] = env[y, x, 0]
    out[1] = env[y, x, 1]
    out[2] = env[y, x, 2]


@njit(cache=True, inline="always")
def _texture_albedo(tex, half_extent, uv_tiles, px, pz, out):
    n = tex.shape[0]
    u = (px / (2.0 * half_extent) + 0.5) * uv_tiles
    v = (pz / (2.0 * half_extent) + 0.5) * uv_tiles
    u = u - np.floor(u)
    v = v - np.floor(v)
    x = int(u * n)
    if x >= n:
        x = n - 1
    y = int(v * n)
    if y >= n:
        y = n - 1
    out[0] = tex[y, x, 0]
    out[1] = tex[y, x, 1]
    out[2] = tex[y, x, 2]


@njit(cache=True, parallel=True)
def trace_image(origins, dirs,
                node_lo, node_hi, node_left, node_right, node_start, node_count,
                tri_order, tri_v0, tri_e1, tri_e2, tri_albedo, tri_textured,
                tex, tex_half_extent, tex_tiles,
                env, env_yaw, env_on,
                light_pos, light_intensity, light_on,
                samples, albedo_only):
    """Shades every primary ray; returns (radiance (N,3) f4, depth (N,) f8).

    Radiance model: Lambertian direct lighting. The cosine-weighted estimate
    of the environment term reduces to albedo * mean(visibility * env), and
    the point light adds albedo/pi * I * cos(theta) / d^2 behind one shadow
    ray. albedo_only skips lighting and returns the surface albedo (used for
    the ground-texture target image).
    """
    n = origins.shape[0]
    img = np.zeros((n, 3), np.float32)
    depth = np.empty(n, np.float64)
    nsamp = samples.shape[1]
    for i in prange(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t, face = _bvh_closest(ox, oy, oz, dx, dy, dz,
                               node_lo, node_hi, node_left, node_right,
                               node_start, node_count, tri_order,
                               tri_v0, tri_e1, tri_e2, RAY_EPS, np.inf)
        if face < 0:
            depth[i] = np.inf
            if env_on and not albedo_only:
                rad = np.empty(3)
                _env_radiance(env, env_yaw, dx, dy, dz, rad)
                img[i, 0] = rad[0]
                img[i, 1] = rad[1]
                img[i, 2] = rad[2]
            continue
        depth[i] = t
        px = ox + t * dx
        py = oy + t * dy
        pz = oz + t * dz

        alb = np.empty(3)
        if tri_textured[face]:
            _texture_albedo(tex, tex_half_extent, tex_tiles, px, pz, alb)
        else:
            alb[0] = tri_albedo[face, 0]
            alb[1] = tri_albedo[face, 1]
            alb[2] = tri_albedo[face, 2]
        if albedo_only:
            img[i, 0] = alb[0]
            img[i, 1] = alb[1]
            img[i, 2] = alb[2]
            continue

        # geometric normal, flipped toward the viewer (two-sided)
        e1 = tri_e1[face]
        e2 = tri_e2[face]
        nx = e1[1] * e2[2] - e1[2] * e2[1]
        ny = e1[2] * e2[0] - e1[0] * e2[2]
        nz = e1[0] * e2[1] - e1[1] * e2[0]
        norm = np.sqrt(nx * nx + ny * ny + nz * nz)
        nx /= norm
        ny /= norm
        nz /= norm
        if nx * dx + ny * dy + nz * dz > 0.0:
            nx, ny, nz = -nx, -ny, -nz

        eps = SHADOW_EPS * (1.0 + t)
        sx = px + nx * eps
        sy = py + ny * eps
        sz = pz + nz * eps

        # orthonormal basis around the normal
        if np.abs(nx) > 0.9:
            bx, by, bz = 0.0, 1.0, 0.0
        else:
            bx, by, bz = 1.0, 0.0, 0.0
        tx = ny * bz - nz * by
        ty = nz * bx - nx * bz
        tz = nx * by - ny * bx
        tn = np.sqrt(tx * tx + ty * ty + tz * tz)
        tx /= tn
        ty /= tn
        tz /= tn
        ux = ny * tz - nz * ty
        uy = nz * tx - nx * tz
        uz = nx * ty - ny * tx

        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        if env_on:
            rad = np.empty(3)
            for s in range(nsamp):
                u1 = samples[i, s, 0]
                u2 = samples[i, s, 1]
                r = np.sqrt(u1)
                ang = 2.0 * np.pi * u2
                lx = r * np.cos(ang)
                ly = r * np.sin(ang)
                lz = np.sqrt(1.0 - u1 if u1 < 1.0 else 0.0)
                wx = lx * tx + ly * ux + lz * nx
                wy = lx * ty + ly * uy + lz * ny
                wz = lx * tz + ly * uz + lz * nz
                if _bvh_occluded(sx, sy, sz, wx, wy, wz,
                                 node_lo, node_hi, node_left, node_right,
                                 node_start, node_count, tri_order,
                                 tri_v0, tri_e1, tri_e2, RAY_EPS, np.inf):
                    continue
                _env_radiance(env, env_yaw, wx, wy, wz, rad)
                acc0 += rad[0]
                acc1 += rad[1]
                acc2 += rad[2]
            inv = 1.0 / nsamp
            acc0 *= inv
            acc1 *= inv
            acc2 *= inv

        if light_on:
            lxv = light_pos[0] - px
            lyv = light_pos[1] - py
            lzv = light_pos[2] - pz
            d2 = lxv * lxv + lyv * lyv + lzv * lzv
            dist = np.sqrt(d2)
            lxv /= dist
            lyv /= dist
            lzv /= dist
            cosl = lxv * nx + lyv * ny + lzv * nz
            if cosl > 0.0 and not _bvh_occluded(sx, sy, sz, lxv, lyv, lzv,
                                                node_lo, node_hi, node_left, node_right,
                                                node_start, node_count, tri_order,
                                                tri_v0, tri_e1, tri_e2,
                                                RAY_EPS, dist - eps):
                scale = cosl / (np.pi * d2)
                acc0 += light_intensity[0] * scale
                acc1 += light_intensity[1] * scale
                acc2 += light_intensity[2] * scale

        img[i, 0] = alb[0] * acc0
        img[i, 1] = alb[1] * acc1
        img[i, 2] = alb[2] * acc2
    return img, depth


@njit(cache=True, parallel=True)
def trace_depth(origins, dirs,
                node_lo, node_hi, node_left, node_right, node_start, node_count,
                tri_order, tri_v0, tri_e1, tri_e2):
    n = origins.shape[0]
    depth = np.empty(n, np.float64)
    for i in prange(n):
        t, face = _bvh_closest(origins[i, 0], origins[i, 1], origins[i, 2],
                               dirs[i, 0], dirs[i, 1], dirs[i, 2],
                               node_lo, node_hi, node_left, node_right,
                               node_start, node_count, tri_order,
                               tri_v0, tri_e1, tri_e2, RAY_EPS, np.inf)
        depth[i] = t if face >= 0 else np.inf
    return depth
