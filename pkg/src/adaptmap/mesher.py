"""Multi-resolution Marching Cubes over a :class:`VoxelMap`.

Every coarse cell owns the cubes whose lower corner lies inside it.  Cubes
fully inside the cell use the cell's own resolution; cubes reaching into the
forward neighbours (3 faces, 3 edges, 1 corner) use the finest resolution
among the cells they touch.  Corners that do not exist at that resolution are
replaced by the voxel of the owning cell's own level, so substituted corners
may coincide and the edges between them carry no vertex.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .mc_tables import CORNERS, EDGES, triangle_table
from .policy import QualityLevel
from .voxel_map import VoxelMap

WELD_EPS = 1e-6
NO_LABEL = 65535
CHUNK = 1 << 16  # cubes per extraction batch


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.uint8))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint16))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


@dataclass
class CornerSample:
    position: np.ndarray
    tsdf: float
    weight: float
    source_level: QualityLevel


@dataclass
class _Samples:
    level: np.ndarray  # source level
    index: np.ndarray  # (n, 3) voxel index at the source level
    tsdf: np.ndarray
    weight: np.ndarray
    color: np.ndarray
    label: np.ndarray

    observed: np.ndarray | None = None

    @property
    def present(self):
        ok = self.weight > 0
        return ok if self.observed is None else ok & self.observed


def fetch_samples(vmap: VoxelMap, level: int, gidx: np.ndarray) -> _Samples:
    """Voxels backing the level-``level`` grid indices ``gidx``.

    A cell split at ``level`` answers with its child, which has to be observed.
    Any other cell answers with the voxel of its own level (its coarse voxel
    when it is split finer than requested).  Children only count as observed
    once a measurement reached them at their own resolution; values seeded
    from the parent at split time are never meshed.
    """
    m = vmap
    gidx = np.asarray(gidx, dtype=np.int64).reshape(-1, 3)
    n = len(gidx)
    r = m.R[level]
    cell = np.floor_divide(gidx, r)
    flat = m.cell_ids(cell)
    ok = flat >= 0
    f = np.where(ok, flat, 0)
    cl = np.where(ok, m.child_level[f], 0).astype(np.int64) if len(f) else np.zeros(0, np.int64)
    src = np.where(cl <= level, cl, 0)
    out = _Samples(src, cell.copy(), np.zeros(n), np.zeros(n), np.zeros((n, 3)),
                   np.where(ok, m.best_label[f], -1) if len(f) else np.zeros(0, np.int64),
                   np.ones(n, dtype=bool))
    coarse = ok & (src == 0)
    out.tsdf[coarse] = m.tsdf[f[coarse]]
    out.weight[coarse] = m.weight[f[coarse]]
    out.color[coarse] = m.color[f[coarse]]
    for lvl in (1, 2):
        sel = np.flatnonzero(ok & (src == lvl))
        if len(sel) == 0:
            continue
        rs = m.R[lvl]
        sidx = np.floor_divide(gidx[sel], r // rs)
        local = sidx - cell[sel] * rs
        child = (local[:, 0] * rs + local[:, 1]) * rs + local[:, 2]
        pool = m.pools[lvl]
        slot = m.child_slot[f[sel]]
        out.index[sel] = sidx
        out.tsdf[sel] = pool.tsdf[slot, child]
        out.weight[sel] = pool.weight[slot, child]
        out.color[sel] = pool.color[slot, child]
        out.observed[sel] = pool.observed[slot, child]
    return out


def fetch_corner(vmap: VoxelMap, world_position, requested_level) -> CornerSample | None:
    """Sample backing ``world_position`` at ``requested_level``; None when absent."""
    level = int(requested_level)
    v = vmap.sizes.size(level)
    gidx = np.floor(np.asarray(world_position, dtype=float) / v).astype(np.int64)[None]
    s = fetch_samples(vmap, level, gidx)
    if not s.present[0]:
        return None
    src = int(s.level[0])
    pos = (s.index[0] + 0.5) * vmap.sizes.size(src)
    return CornerSample(pos, float(s.tsdf[0]), float(s.weight[0]), QualityLevel(src))


def marching_cubes_cell(corners) -> list[np.ndarray]:
    """Triangles (3x3 arrays of positions) for one cube of 8 corner samples.

    Returns an empty list when any corner is missing or unobserved.
    """
    if any(c is None or not c.weight > 0 for c in corners):
        return []
    pos = np.array([c.position for c in corners], dtype=float)
    val = np.array([c.tsdf for c in corners], dtype=float)
    case = int(np.dot(val < 0, 1 << np.arange(8)))
    tris = []
    for tri in triangle_table()[case]:
        if tri[0] < 0:
            break
        pts = []
        for e in tri:
            a, b = EDGES[e]
            pts.append(_interp(pos[a], pos[b], val[a], val[b]))
        pts = np.array(pts)
        if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) > 0:
            tris.append(pts)
    return tris


def _interp(pa, pb, ta, tb):
    t = ta / (ta - tb)
    return pa + t * (pb - pa)


def _region_cubes(vmap: VoxelMap, flat: np.ndarray):
    """Lower-corner grid indices of every cube owned by ``flat``, grouped by level."""
    m = vmap
    coords = m.cell_coords(flat)
    r_own = np.array(m.R)[m.child_level[flat]]
    fwd = {}
    for e in itertools.product((0, 1), repeat=3):
        if e == (0, 0, 0):
            fwd[e] = r_own
            continue
        nb = m.cell_ids(coords + np.array(e))
        fwd[e] = np.where(nb >= 0, np.array(m.R)[m.child_level[np.maximum(nb, 0)]], 1)
    level_of_r = {m.R[l]: l for l in (0, 1, 2)}
    out: dict[int, list] = {}
    for axes in itertools.product((0, 1), repeat=3):
        involved = [e for e in fwd if all(e[a] <= axes[a] for a in range(3))]
        r_reg = np.max(np.stack([fwd[e] for e in involved]), axis=0)
        for r in np.unique(r_reg).tolist():
            sel = r_reg == r
            ranges = [np.array([r - 1]) if axes[a] else np.arange(r - 1) for a in range(3)]
            if any(len(x) == 0 for x in ranges):
                continue
            local = np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, 3)
            lower = (coords[sel] * r)[:, None, :] + local[None]
            out.setdefault(level_of_r[r], []).append(lower.reshape(-1, 3))
    return {l: np.concatenate(v) for l, v in out.items()}


def extract_mesh(vmap: VoxelMap) -> Mesh:
    m = vmap
    flat = m.active_cells()
    if len(flat) == 0:
        return Mesh()
    table = triangle_table()
    edge_pairs = []  # per emitted triangle corner: (sample a, sample b) as global sample rows
    rows = {"level": [], "index": [], "tsdf": [], "color": [], "label": []}
    offset = 0
    for level, lower_all in sorted(_region_cubes(m, flat).items()):
        lower_all = np.unique(lower_all, axis=0)
        for start in range(0, len(lower_all), CHUNK):
            lower = lower_all[start:start + CHUNK]
            gidx = (lower[:, None, :] + CORNERS[None]).reshape(-1, 3)
            s = fetch_samples(m, level, gidx)
            present = s.present.reshape(-1, 8).all(axis=1)
            tsdf = s.tsdf.reshape(-1, 8)
            case = ((tsdf < 0) * (1 << np.arange(8))).sum(axis=1)
            cube = np.flatnonzero(present & (case > 0) & (case < 255))
            tri = table[case[cube]]  # (c, T, 3)
            ci, ti = np.nonzero(tri[:, :, 0] >= 0)
            edges = tri[ci, ti]  # (t, 3)
            base = cube[ci][:, None] * 8
            pairs = np.stack([base + EDGES[edges][..., 0], base + EDGES[edges][..., 1]], axis=-1)
            # keep only the samples some triangle refers to
            used, pinv = np.unique(pairs.ravel(), return_inverse=True)
            edge_pairs.append(pinv.reshape(pairs.shape) + offset)
            for key, val in (("level", s.level), ("index", s.index), ("tsdf", s.tsdf),
                             ("color", s.color), ("label", s.label)):
                rows[key].append(val[used])
            offset += len(used)
    if not edge_pairs:
        return Mesh()
    pairs = np.concatenate(edge_pairs).reshape(-1, 2)
    if len(pairs) == 0:
        return Mesh()
    lvl = np.concatenate(rows["level"])
    idx = np.concatenate(rows["index"])
    tsdf = np.concatenate(rows["tsdf"])
    color = np.concatenate(rows["color"])
    label = np.concatenate(rows["label"])
    # canonical sample ids: rank of (level, i, j, k)
    used, pinv = np.unique(pairs.ravel(), return_inverse=True)
    ident = np.column_stack([lvl[used], idx[used]])
    uid, first, sinv = np.unique(ident, axis=0, return_index=True, return_inverse=True)
    sid = sinv.reshape(-1)[pinv].reshape(-1, 2)
    rep = used[first]
    lo = np.minimum(sid[:, 0], sid[:, 1])
    hi = np.maximum(sid[:, 0], sid[:, 1])
    ekey = lo * len(uid) + hi
    ukey, vinv = np.unique(ekey, return_inverse=True)
    ea, eb = np.divmod(ukey, len(uid))
    ra, rb = rep[ea], rep[eb]
    size = np.array([m.sizes.size(l) for l in (0, 1, 2)])
    pa = (idx[ra] + 0.5) * size[lvl[ra]][:, None]
    pb = (idx[rb] + 0.5) * size[lvl[rb]][:, None]
    ta, tb = tsdf[ra], tsdf[rb]
    t = (ta / (ta - tb))[:, None]
    verts = pa + t * (pb - pa)
    cols = color[ra] + t * (color[rb] - color[ra])
    labs = np.where(np.abs(ta) <= np.abs(tb), label[ra], label[rb])
    tris = vinv.reshape(-1, 3)
    # geometric weld: coincident vertices from different edges
    grid = np.round(verts / WELD_EPS).astype(np.int64)
    _, wfirst, winv = np.unique(grid, axis=0, return_index=True, return_inverse=True)
    winv = winv.reshape(-1)
    verts, cols, labs = verts[wfirst], cols[wfirst], labs[wfirst]
    tris = winv[tris]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]
    v = verts[tris]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    tris = tris[area2 > 0]
    used_v, tris = np.unique(tris, return_inverse=True)
    tris = tris.reshape(-1, 3)
    verts, cols, labs = verts[used_v], cols[used_v], labs[used_v]
    return Mesh(verts,np.clip(np.round(cols), 0, 255).astype(np.uint8),
                np.where(labs >= 0, labs, NO_LABEL).astype(np.uint16), tris)


def boundary_edges(mesh: Mesh) -> tuple[int, int]:
    """(edges used once, edges used more than twice) after welding."""
    if len(mesh.triangles) == 0:
        return 0, 0
    e = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int((counts == 1).sum()), int((counts > 2).sum())
