"""Marching Cubes triangle table, generated from face rules.

Corner ``c`` sits at ``(c & 1, c >> 1 & 1, c >> 2 & 1)``; a corner is inside
when its value is negative.  On every cube face the crossing points are joined
so that inside corners are kept apart (ambiguous faces separate the negative
diagonal).  The rule looks at one face only, so two cubes sharing a face always
agree on it and the resulting surface has no cracks.  Polygons are triangulated
with normals pointing towards the positive side, and no diagonal may join two
crossings of the same face: such a chord lies in the shared face, where the
neighbouring cube can emit it too, leaving an edge with four triangles.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

CORNERS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)], dtype=np.int64)
EDGES = np.array([(a, b) for a in range(8) for b in range(8)
                  if a < b and bin(a ^ b).count("1") == 1], dtype=np.int64)
_EDGE_ID = {(int(a), int(b)): i for i, (a, b) in enumerate(EDGES)}
_EDGE_ID.update({(b, a): i for (a, b), i in list(_EDGE_ID.items())})


def _faces():
    """Faces as corner cycles, counter-clockwise seen from outside the cube."""
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            def corner(du, dv):
                p = [0, 0, 0]
                p[axis], p[u], p[v] = side, du, dv
                return p[0] + 2 * p[1] + 4 * p[2]
            cyc = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]
            normal = np.zeros(3)
            normal[axis] = 1 if side else -1
            pts = CORNERS[cyc].astype(float)
            if np.dot(np.cross(pts[1] - pts[0], pts[2] - pts[1]), normal) < 0:
                cyc = cyc[::-1]
            faces.append(cyc)
    return faces


FACES = _faces()


def _polygons(case: int) -> list[list[int]]:
    inside = [(case >> c) & 1 for c in range(8)]
    nxt: dict[int, int] = {}
    for cyc in FACES:
        ins = [inside[c] for c in cyc]
        for i in range(4):
            if ins[i] and not ins[(i + 1) % 4]:
                # exit edge of an inside arc; walk back to the arc's entry edge
                j = i
                while ins[(j - 1) % 4]:
                    j = (j - 1) % 4
                exit_e = _EDGE_ID[(cyc[i], cyc[(i + 1) % 4])]
                entry_e = _EDGE_ID[(cyc[(j - 1) % 4], cyc[j])]
                nxt[exit_e] = entry_e
    polys, seen = [], set()
    for start in sorted(nxt):
        if start in seen:
            continue
        poly, e = [], start
        while e not in seen:
            seen.add(e)
            poly.append(e)
            e = nxt[e]
        polys.append(poly)
    return polys


def _in_face(a: int, b: int) -> bool:
    ca, cb = set(EDGES[a].tolist()), set(EDGES[b].tolist())
    return any(ca <= set(f) and cb <= set(f) for f in FACES)


def _triangulations(poly: list[int]):
    """All triangulations of a convex-ordered polygon, the fan from poly[0] first."""
    if len(poly) == 3:
        yield [tuple(poly)]
        return
    a, b = poly[0], poly[-1]
    for k in range(len(poly) - 2, 0, -1):
        left = list(_triangulations(poly[:k + 1])) if k >= 2 else [[]]
        right = list(_triangulations(poly[k:])) if len(poly) - k >= 3 else [[]]
        for lt in left:
            for rt in right:
                yield lt + [(a, poly[k], b)] + rt


def _triangulate(poly: list[int]) -> list[tuple[int, int, int]]:
    n = len(poly)
    sides = {frozenset((poly[i], poly[(i + 1) % n])) for i in range(n)}
    for tris in _triangulations(poly):
        chords = {frozenset(e) for t in tris for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))} - sides
        if not any(_in_face(*tuple(c)) for c in chords):
            return tris
    raise AssertionError(f"no face-free triangulation for polygon {poly}")


def _orientation_sign() -> int:
    mid = CORNERS[EDGES].mean(axis=1)
    poly = _polygons(1)[0]
    p = mid[poly]
    n = np.cross(p[1] - p[0], p[2] - p[0])
    return 1 if np.dot(n, [1, 1, 1]) > 0 else -1


@lru_cache(maxsize=1)
def triangle_table() -> np.ndarray:
    """(256, T, 3) edge indices per triangle, padded with -1."""
    flip = _orientation_sign() < 0
    cases = []
    for case in range(256):
        tris = []
        for poly in _polygons(case):
            if flip:
                poly = poly[::-1]
            tris += _triangulate(poly)
        cases.append(tris)
    table = np.full((256, max(map(len, cases)), 3), -1, dtype=np.int64)
    for case, tris in enumerate(cases):
        if tris:
            table[case, :len(tris)] = tris
    return table
