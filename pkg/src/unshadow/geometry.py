"""Triangle meshes and procedural primitive tessellation.

Scenes are y-up; the ground plane is the y=0 plane. Primitives are built
with their base resting on y=0 so placement only needs scale / yaw /
translate in plane coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N,3) float64 world positions
    triangles: np.ndarray  # (M,3) int32 vertex indices
    face_albedo: np.ndarray  # (M,3) float32
    # 1 where the face belongs to the textured ground plane (albedo comes
    # from the plane texture at the hit point), 0 for flat face albedo.
    face_textured: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.face_albedo = np.ascontiguousarray(self.face_albedo, dtype=np.float32)
        if self.face_textured is None:
            self.face_textured = np.zeros(len(self.triangles), dtype=np.uint8)
        self.face_textured = np.ascontiguousarray(self.face_textured, dtype=np.uint8)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle index out of range")

    @property
    def num_faces(self) -> int:
        return len(self.triangles)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise GeometryError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, scale: float = 1.0, yaw: float = 0.0,
                    translate=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        v = (self.vertices * scale) @ rot.T + np.asarray(translate, dtype=np.float64)
        return TriangleMesh(v, self.triangles, self.face_albedo, self.face_textured)

    def snapped_to_ground(self) -> "TriangleMesh":
        """Shift so the lowest vertex lies exactly on y=0."""
        v = self.vertices.copy()
        v[:, 1] -= v[:, 1].min()
        return TriangleMesh(v, self.triangles, self.face_albedo, self.face_textured)

    def without_degenerate_faces(self, eps: float = 1e-12) -> "TriangleMesh":
        v = self.vertices
        t = self.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        keep = area2 > eps
        return TriangleMesh(v, t[keep], self.face_albedo[keep], self.face_textured[keep])


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    if not meshes:
        raise GeometryError("cannot merge zero meshes")
    verts, tris, albs, texs = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        albs.append(m.face_albedo)
        texs.append(m.face_textured)
        offset += len(m.vertices)
    return TriangleMesh(
        np.concatenate(verts), np.concatenate(tris),
        np.concatenate(albs), np.concatenate(texs),
    )


def _faced(vertices, triangles, albedo, textured=0) -> TriangleMesh:
    n = len(triangles)
    alb = np.tile(np.asarray(albedo, dtype=np.float32), (n, 1))
    tex = np.full(n, textured, dtype=np.uint8)
    return TriangleMesh(np.asarray(vertices, float), np.asarray(triangles, np.int32), alb, tex)


def box_mesh(sx: float, sy: float, sz: float, albedo=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, base centered at origin, y in [0, sy]."""
    hx, hz = sx / 2.0, sz / 2.0
    v = np.array([
        [-hx, 0, -hz], [hx, 0, -hz], [hx, 0, hz], [-hx, 0, hz],
        [-hx, sy, -hz], [hx, sy, -hz], [hx, sy, hz], [-hx, sy, hz],
    ])
    t = np.array([
        [0, 2, 1], [0, 3, 2],          # bottom
        [4, 5, 6], [4, 6, 7],          # top
        [0, 1, 5], [0, 5, 4],          # -z
        [2, 3, 7], [2, 7, 6],          # +z
        [1, 2, 6], [1, 6, 5],          # +x
        [3, 0, 4], [3, 4, 7],          # -x
    ])
    return _faced(v, t, albedo)


def cylinder_mesh(radius: float, height: float, segments: int = 32,
                  albedo=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Vertical cylinder, base disk on y=0."""
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    bottom = ring.copy()
    top = ring.copy()
    top[:, 1] = height
    centers = np.array([[0.0, 0.0, 0.0], [0.0, height, 0.0]])
    v = np.concatenate([bottom, top, centers])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris.append([i, j, segments + i])
        tris.append([j, segments + j, segments + i])
        tris.append([cb, j, i])                      # bottom cap
        tris.append([ct, segments + i, segments + j])  # top cap
    return _faced(v, np.array(tris), albedo)


def sphere_mesh(radius: float, rings: int = 12, segments: int = 24,
                albedo=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """UV sphere resting on y=0 (center at (0, radius, 0))."""
    verts = [[0.0, 2.0 * radius, 0.0]]
    for r in range(1, rings):
        phi = np.pi * r / rings
        y = radius + radius * np.cos(phi)
        rr = radius * np.sin(phi)
        for s in range(segments):
            th = 2.0 * np.pi * s / segments
            verts.append([rr * np.cos(th), y, rr * np.sin(th)])
    verts.append([0.0, 0.0, 0.0])
    south = len(verts) - 1
    tris = []
    for s in range(segments):
        tris.append([0, 1 + (s + 1) % segments, 1 + s])
    for r in range(rings - 2):
        a = 1 + r * segments
        b = a + segments
        for s in range(segments):
            s2 = (s + 1) % segments
            tris.append([a + s, a + s2, b + s])
            tris.append([a + s2, b + s2, b + s])
    a = 1 + (rings - 2) * segments
    for s in range(segments):
        tris.append([a + s, a + (s + 1) % segments, south])
    return _faced(np.array(verts), np.array(tris), albedo)


def plane_mesh(half_extent: float, albedo=(1.0, 1.0, 1.0), textured: bool = False) -> TriangleMesh:
    """Ground quad on y=0 centered at the origin."""
    e = half_extent
    v = np.array([[-e, 0, -e], [e, 0, -e], [e, 0, e], [-e, 0, e]])
    t = np.array([[0, 2, 1], [0, 3, 2]])
    return _faced(v, t, albedo, textured=1 if textured else 0)
