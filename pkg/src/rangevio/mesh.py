"""Triangle meshes with vectorized ray casting and surface sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RAY_EPS = 1e-9


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product without numpy's moveaxis overhead."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


@dataclass
class RayHit:
    t: float
    face: int
    point: np.ndarray


class TriangleMesh:
    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        v0 = self.vertices[self.faces[:, 0]]
        self._v0 = v0
        self._e1 = self.vertices[self.faces[:, 1]] - v0
        self._e2 = self.vertices[self.faces[:, 2]] - v0

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(np.cross(self._e1, self._e2), axis=1)

    def ray_cast(self, origin, direction) -> RayHit | None:
        """Nearest intersection of a ray with the mesh (Moller-Trumbore, all faces)."""
        o = np.asarray(origin, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        pvec = _cross_rows(d[None, :], self._e2)
        det = np.einsum("ij,ij->i", self._e1, pvec)
        ok = np.abs(det) > RAY_EPS
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - self._v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = _cross_rows(tvec, self._e1)
        v = (qvec @ d) * inv_det
        t = np.einsum("ij,ij->i", qvec, self._e2) * inv_det
        # small barycentric slack: landmarks sit exactly on faces
        slack = 1e-9
        hit = ok & (u >= -slack) & (v >= -slack) & (u + v <= 1.0 + slack) & (t > RAY_EPS)
        if not np.any(hit):
            return None
        ts = np.where(hit, t, np.inf)
        face = int(np.argmin(ts))
        return RayHit(float(ts[face]), face, o + ts[face] * d)

    def first_hit_distances(self, origin, directions) -> np.ndarray:
        """Nearest-hit distance per ray from one origin (inf when a ray misses).

        Directions need not be normalized; distances are in units of each
        direction's own length (t = 1 reaches origin + direction).
        """
        o = np.asarray(origin, dtype=float)
        D = np.asarray(directions, dtype=float)  # (R, 3)
        e1 = self._e1  # (F, 3)
        e2 = self._e2
        pvec = np.empty((D.shape[0], e2.shape[0], 3))
        pvec[:, :, 0] = D[:, 1, None] * e2[None, :, 2] - D[:, 2, None] * e2[None, :, 1]
        pvec[:, :, 1] = D[:, 2, None] * e2[None, :, 0] - D[:, 0, None] * e2[None, :, 2]
        pvec[:, :, 2] = D[:, 0, None] * e2[None, :, 1] - D[:, 1, None] * e2[None, :, 0]
        det = np.einsum("fj,rfj->rf", e1, pvec)
        ok = np.abs(det) > RAY_EPS
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = o - self._v0  # (F, 3)
        u = np.einsum("fj,rfj->rf", tvec, pvec) * inv_det
        qvec = _cross_rows(tvec, e1)  # (F, 3)
        v = np.einsum("fj,rj->rf", qvec, D) * inv_det
        t = np.einsum("fj,fj->f", qvec, e2)[None, :] * inv_det
        slack = 1e-9
        hit = ok & (u >= -slack) & (v >= -slack) & (u + v <= 1.0 + slack) & (t > RAY_EPS)
        ts = np.where(hit, t, np.inf)
        return ts.min(axis=1)

    def sample_surface(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform samples on the surface; returns (points, face indices)."""
        areas = self.face_areas()
        probs = areas / areas.sum()
        faces = rng.choice(len(self.faces), size=count, p=probs)
        r1 = rng.uniform(size=count)
        r2 = rng.uniform(size=count)
        flip = r1 + r2 > 1.0
        r1[flip] = 1.0 - r1[flip]
        r2[flip] = 1.0 - r2[flip]
        pts = self._v0[faces] + r1[:, None] * self._e1[faces] + r2[:, None] * self._e2[faces]
        return pts, faces


def make_box(center, size) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box as (vertices, faces) with outward-facing triangles."""
    c = np.asarray(center, dtype=float)
    s = 0.5 * np.asarray(size, dtype=float)
    corners = np.array(
        [
            [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
        ],
        dtype=float,
    )
    verts = c + corners * s
    quads = [
        (0, 3, 2, 1),  # bottom (z-)
        (4, 5, 6, 7),  # top (z+)
        (0, 1, 5, 4),  # y-
        (2, 3, 7, 6),  # y+
        (1, 2, 6, 5),  # x+
        (3, 0, 4, 7),  # x-
    ]
    faces = []
    for a, b, cc, d in quads:
        faces.append((a, b, cc))
        faces.append((a, cc, d))
    return verts, np.array(faces, dtype=int)


def merge_meshes(parts: list[tuple[np.ndarray, np.ndarray]]) -> TriangleMesh:
    verts = []
    faces = []
    offset = 0
    for v, f in parts:
        verts.append(v)
        faces.append(np.asarray(f, dtype=int) + offset)
        offset += len(v)
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def make_rectangle(x0, x1, y0, y1, z) -> tuple[np.ndarray, np.ndarray]:
    verts = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=int)
    return verts, faces
