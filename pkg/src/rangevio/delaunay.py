"""Incremental Delaunay triangulation in the image plane.

Point sets here are small (the SLAM feature budget), so an O(n^2)
Bowyer-Watson insertion is plenty fast. Predicates evaluate the usual
orientation / in-circle determinants in floats and fall back to exact
rational arithmetic when the float value is within its rounding-error bound,
so the empty-circumcircle property holds at tolerance even for near-cocircular
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateGeometryError

# in-circle determinant values with magnitude below this (relative to the
# term scale) are re-evaluated exactly
_PREDICATE_GUARD = 1e-10


def _orient_det(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def orient(a, b, c) -> int:
    """Sign of twice the signed area of triangle abc (+1 CCW, -1 CW, 0 collinear)."""
    det = _orient_det(a[0], a[1], b[0], b[1], c[0], c[1])
    scale = abs(b[0] - a[0]) * abs(c[1] - a[1]) + abs(b[1] - a[1]) * abs(c[0] - a[0])
    if abs(det) <= _PREDICATE_GUARD * max(scale, 1e-300):
        fa = [Fraction(float(v)) for v in (a[0], a[1], b[0], b[1], c[0], c[1])]
        det = _orient_det(*fa)
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


def _incircle_det(ax, ay, bx, by, cx, cy, dx, dy):
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    return ad * (bdx * cdy - bdy * cdx) + bd * (cdx * ady - cdy * adx) + cd * (adx * bdy - ady * bdx)


def incircle(a, b, c, d) -> int:
    """+1 if d lies strictly inside the circumcircle of CCW triangle abc."""
    det = _incircle_det(a[0], a[1], b[0], b[1], c[0], c[1], d[0], d[1])
    adx, ady = abs(a[0] - d[0]), abs(a[1] - d[1])
    bdx, bdy = abs(b[0] - d[0]), abs(b[1] - d[1])
    cdx, cdy = abs(c[0] - d[0]), abs(c[1] - d[1])
    scale = (adx * adx + ady * ady) * (bdx * cdy + bdy * cdx) + (bdx * bdx + bdy * bdy) * (
        cdx * ady + cdy * adx
    ) + (cdx * cdx + cdy * cdy) * (adx * bdy + ady * bdx)
    if abs(det) <= _PREDICATE_GUARD * max(scale, 1e-300):
        fa = [Fraction(float(v)) for v in (a[0], a[1], b[0], b[1], c[0], c[1], d[0], d[1])]
        det = _incircle_det(*fa)
    if det > 0:
        return 1
    if det < 0:
        return -1
    return 0


@dataclass
class Triangulation:
    """Triangles are CCW index triples, sorted canonically for determinism."""

    vertices: np.ndarray  # (n, 2)
    triangles: list[tuple[int, int, int]]

    def min_angle(self) -> float:
        return min(triangle_min_angle(self.vertices[list(t)]) for t in self.triangles)


def triangle_min_angle(pts: np.ndarray) -> float:
    """Smallest interior angle (radians) of a triangle given as (3, 2) or (3, 3)."""
    angles = []
    for i in range(3):
        u = pts[(i + 1) % 3] - pts[i]
        v = pts[(i + 2) % 3] - pts[i]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return 0.0
        cosang = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
        angles.append(np.arccos(cosang))
    return float(min(angles))


def _canonical(tri: tuple[int, int, int], pts: np.ndarray) -> tuple[int, int, int]:
    i = tri.index(min(tri))
    t = (tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3])
    if orient(pts[t[0]], pts[t[1]], pts[t[2]]) < 0:
        t = (t[0], t[2], t[1])
    return t


def delaunay(points) -> Triangulation:
    """Delaunay triangulation of 2-D points via Bowyer-Watson insertion.

    Raises DegenerateGeometryError for fewer than 3 points or collinear input.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 points")
    if all(orient(pts[0], pts[1], pts[k]) == 0 for k in range(2, n)):
        raise DegenerateGeometryError("points are collinear")

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = max(float(np.max(hi - lo)), 1.0)
    cx, cy = (lo + hi) * 0.5
    # super-triangle comfortably containing every point
    big = 64.0 * span
    sup = np.array([[cx - big, cy - big], [cx + big, cy - big], [cx, cy + big]])
    work = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2
    tris: list[tuple[int, int, int]] = [(s0, s1, s2)]

    for p in range(n):
        point = work[p]
        bad = _bad_triangles(work, tris, point)
        if not bad:
            # numerically on an edge/cocircular boundary: fall back to the
            # containing triangle so insertion always proceeds
            for idx, t in enumerate(tris):
                if _contains(work, t, point):
                    bad = [idx]
                    break
        # cavity boundary = edges of bad triangles not shared by two bad ones
        edge_count: dict[tuple[int, int], tuple[int, int]] = {}
        for idx in bad:
            a, b, c = tris[idx]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                if key in edge_count:
                    del edge_count[key]
                else:
                    edge_count[key] = e
        for idx in sorted(bad, reverse=True):
            del tris[idx]
        for e in edge_count.values():
            tris.append((e[0], e[1], p))

    final = [t for t in tris if s0 not in t and s1 not in t and s2 not in t]
    if not final:
        raise DegenerateGeometryError("triangulation collapsed (degenerate input)")
    canon = sorted(_canonical(t, work) for t in final)
    return Triangulation(pts.copy(), canon)


def _bad_triangles(work: np.ndarray, tris: list[tuple[int, int, int]], point) -> list[int]:
    """Indices of triangles whose circumcircle contains ``point``.

    The determinants are evaluated vectorized in floats; only values inside
    the rounding-error guard band are re-decided with the exact predicate.
    """
    idx = np.asarray(tris, dtype=int)
    a = work[idx[:, 0]]
    b = work[idx[:, 1]]
    c = work[idx[:, 2]]
    ad = a - point
    bd = b - point
    cd = c - point
    a2 = (ad * ad).sum(axis=1)
    b2 = (bd * bd).sum(axis=1)
    c2 = (cd * cd).sum(axis=1)
    det = (
        a2 * (bd[:, 0] * cd[:, 1] - bd[:, 1] * cd[:, 0])
        + b2 * (cd[:, 0] * ad[:, 1] - cd[:, 1] * ad[:, 0])
        + c2 * (ad[:, 0] * bd[:, 1] - ad[:, 1] * bd[:, 0])
    )
    aad = np.abs(ad)
    abd = np.abs(bd)
    acd = np.abs(cd)
    scale = (
        a2 * (abd[:, 0] * acd[:, 1] + abd[:, 1] * acd[:, 0])
        + b2 * (acd[:, 0] * aad[:, 1] + acd[:, 1] * aad[:, 0])
        + c2 * (aad[:, 0] * abd[:, 1] + aad[:, 1] * abd[:, 0])
    )
    out = []
    near = det**2 <= (_PREDICATE_GUARD * np.maximum(scale, 1e-300)) ** 2
    for i in range(len(tris)):
        if near[i]:
            if incircle(a[i], b[i], c[i], point) > 0:
                out.append(i)
        elif det[i] > 0:
            out.append(i)
    return out


def _contains(pts: np.ndarray, tri: tuple[int, int, int], point) -> bool:
    a, b, c = pts[tri[0]], pts[tri[1]], pts[tri[2]]
    if orient(a, b, c) < 0:
        b, c = c, b
    return orient(a, b, point) >= 0 and orient(b, c, point) >= 0 and orient(c, a, point) >= 0


def locate(tri: Triangulation, point) -> int | None:
    """Index of the triangle containing ``point`` (boundary inclusive).

    A point on a shared edge or vertex belongs to the lowest-indexed
    containing triangle; outside the hull returns None.
    """
    point = np.asarray(point, dtype=float)
    for idx, t in enumerate(tri.triangles):
        if _contains(tri.vertices, t, point):
            return idx
    return None


def empty_circumcircle_ok(tri: Triangulation) -> bool:
    """Brute-force check: no vertex strictly inside any triangle's circumcircle."""
    n = tri.vertices.shape[0]
    for t in tri.triangles:
        a, b, c = (tri.vertices[i] for i in t)
        for k in range(n):
            if k in t:
                continue
            if incircle(a, b, c, tri.vertices[k]) > 0:
                return False
    return True


def random_flip_variant(tri: Triangulation, rng: np.random.Generator, flips: int = 5) -> list[tuple[int, int, int]]:
    """A valid alternative triangulation produced by random legal edge flips."""
    tris = [tuple(t) for t in tri.triangles]
    pts = tri.vertices
    for _ in range(flips):
        edges: dict[tuple[int, int], list[int]] = {}
        for idx, t in enumerate(tris):
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                edges.setdefault((min(e), max(e)), []).append(idx)
        shared = [(e, ix) for e, ix in edges.items() if len(ix) == 2]
        rng.shuffle(shared)
        flipped = False
        for (u, v), (i1, i2) in shared:
            o1 = [x for x in tris[i1] if x not in (u, v)][0]
            o2 = [x for x in tris[i2] if x not in (u, v)][0]
            # flip is legal only if quad (o1, u, o2, v) is strictly convex
            if (
                orient(pts[o1], pts[u], pts[o2]) * orient(pts[o1], pts[v], pts[o2]) < 0
                and orient(pts[u], pts[o1], pts[v]) * orient(pts[u], pts[o2], pts[v]) < 0
            ):
                tris[i1] = _canonical((o1, u, o2), pts)
                tris[i2] = _canonical((o1, o2, v), pts)
                flipped = True
                break
        if not flipped:
            break
    return sorted(tris)
