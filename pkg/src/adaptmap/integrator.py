"""Per-frame fusion of posed RGB-D frames into a :class:`VoxelMap`."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .curvature import ComplexityConfig, estimate_frame_complexity
from .frame import Frame, PointCloud, project_frame
from .policy import QualityLevel, QualityPolicy, SplitCause
from .semantics import XI, apply_evidence
from .voxel_map import VoxelMap, pack_keys


@dataclass
class IntegratorConfig:
    truncation: float | None = None  # None -> 2 * coarse voxel size
    w_max: float = 1e4
    max_ray_length: float = 5.0
    min_depth: float = 0.1
    alpha: float = 0.5
    neighbor_split: bool = True
    single_grid: bool = False  # ablation: one coarse subsampling grid feeds every level

    def tau(self, vmap: VoxelMap) -> float:
        tau = self.truncation if self.truncation is not None else 2.0 * vmap.sizes.coarse
        if tau < vmap.sizes.coarse:
            raise ValueError("truncation must be at least one coarse voxel")
        return tau


@dataclass
class FrameStats:
    frame_id: int = 0
    points: int = 0
    rays: dict = field(default_factory=lambda: {0: 0, 1: 0, 2: 0})
    voxels_updated: int = 0
    split: int = 0
    merged: int = 0
    time_ms: float = 0.0


# ------------------------------------------------------------------ subsampling
class AdaptiveSubsampleGrids:
    """One occupancy hash set per quality level, cleared every frame."""

    def __init__(self, sizes, alpha: float = 0.5):
        self.cell = [alpha * sizes.size(l) for l in (0, 1, 2)]
        self.occupied: list[set] = [set(), set(), set()]

    def reset(self):
        for s in self.occupied:
            s.clear()

    def admit_point(self, position) -> set[QualityLevel]:
        out = set()
        for lvl in (0, 1, 2):
            key = tuple(math.floor(c / self.cell[lvl]) for c in position)
            if key not in self.occupied[lvl]:
                self.occupied[lvl].add(key)
                out.add(QualityLevel(lvl))
        return out


@dataclass
class Bundles:
    """Points merged per subsampling-grid cell; one ray each."""

    positions: np.ndarray
    colors: np.ndarray
    weights: np.ndarray
    cc: np.ndarray  # weighted mean complexity, NaN when none
    cc_weight: np.ndarray
    ev_start: np.ndarray  # CSR offsets into the evidence arrays
    ev_label: np.ndarray
    ev_delta: np.ndarray
    first_point: np.ndarray

    def __len__(self):
        return len(self.weights)


def point_evidence(pc: PointCloud, n_labels: int):
    """Per (point, observed label) log-likelihood relative to the remainder."""
    present = pc.labels >= 0
    k = present.sum(axis=1)
    psum = np.where(present, pc.probs, 0.0).sum(axis=1)
    n_rest = n_labels - k
    rem = np.where(n_rest > 0, np.maximum(XI, (1.0 - psum) / np.maximum(n_rest, 1)), 1.0)
    pt, slot = np.nonzero(present)
    delta = pc.weights[pt] * (np.log(pc.probs[pt, slot]) - np.log(rem[pt]))
    return pt, pc.labels[pt, slot].astype(np.int64), delta


def bundle_points(pc: PointCloud, cell: float, cc: np.ndarray, evidence) -> Bundles:
    keys = pack_keys(np.floor(pc.positions / cell).astype(np.int64))
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    # number bundles by first occurrence in pixel order
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    b = rank[inv]
    nb = len(first)
    w = pc.weights
    sw = np.bincount(b, w, nb)
    pos = np.stack([np.bincount(b, w * pc.positions[:, a], nb) for a in range(3)], 1) / sw[:, None]
    col = np.stack([np.bincount(b, w * pc.colors[:, a], nb) for a in range(3)], 1) / sw[:, None]
    has = np.isfinite(cc)
    cw = np.bincount(b[has], w[has], nb)
    csum = np.bincount(b[has], w[has] * cc[has], nb)
    ccm = np.where(cw > 0, csum / np.where(cw > 0, cw, 1.0), np.nan)
    pt, lab, delta = evidence
    if len(pt):
        ekey = b[pt] * (1 << 20) + lab
        ukey, einv = np.unique(ekey, return_inverse=True)
        edelta = np.bincount(einv, delta, len(ukey))
        eb, elab = np.divmod(ukey, 1 << 20)
    else:
        eb = elab = np.zeros(0, dtype=np.int64)
        edelta = np.zeros(0)
    start = np.searchsorted(eb, np.arange(nb + 1))
    return Bundles(pos, col, sw, ccm, cw, start, elab, edelta, np.sort(first))


# --------------------------------------------------------------------- rays
def band_voxels(origin, ends, voxel_size: float, tau: float):
    """Every voxel crossed by the segments [end - tau*dir, end + tau*dir].

    Returns (ray index, integer voxel coordinates).  The near end is clipped at
    the ray origin.  Exact grid traversal: breakpoints are all plane crossings.
    """
    ends = np.asarray(ends, dtype=float).reshape(-1, 3)
    n = len(ends)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    d = ends - origin
    length = np.linalg.norm(d, axis=1)
    dirs = d / length[:, None]
    back = np.minimum(tau, length)
    a = ends - dirs * back[:, None]
    b = ends + dirs * tau
    seg = back + tau
    cols = [np.zeros((n, 1)), seg[:, None]]
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            ia = np.floor(a[:, ax] / voxel_size)
            ib = np.floor(b[:, ax] / voxel_size)
            cnt = np.abs(ib - ia).astype(np.int64)
            m = int(cnt.max())
            if m == 0:
                continue
            k = np.arange(1, m + 1)
            planes = np.where(dirs[:, ax:ax + 1] > 0, ia[:, None] + k, ia[:, None] - k + 1) * voxel_size
            t = (planes - a[:, ax:ax + 1]) / dirs[:, ax:ax + 1]
            cols.append(np.where(k[None] <= cnt[:, None], np.clip(t, 0.0, seg[:, None]), seg[:, None]))
    t = np.sort(np.concatenate(cols, axis=1), axis=1)
    lo, hi = t[:, :-1], t[:, 1:]
    ray, col = np.nonzero(hi > lo)
    mid = 0.5 * (lo[ray, col] + hi[ray, col])
    p = a[ray] + dirs[ray] * mid[:, None]
    ijk = np.floor(p / voxel_size).astype(np.int64)
    # rounding slivers at plane crossings can revisit a voxel; keep its first visit
    key = pack_keys(ijk)
    order = np.lexsort((key, ray))
    dup = np.zeros(len(ray), dtype=bool)
    dup[order[1:]] = (ray[order[1:]] == ray[order[:-1]]) & (key[order[1:]] == key[order[:-1]])
    return ray[~dup], ijk[~dup]


def projective_sdf(ends, origin, ijk, ray, voxel_size, tau):
    d = ends[ray] - origin
    dirs = d / np.linalg.norm(d, axis=1)[:, None]
    centers = (ijk + 0.5) * voxel_size
    sdf = ((ends[ray] - centers) * dirs).sum(axis=1)
    return np.clip(sdf, -tau, tau)


def _fuse(tsdf, weight, color, idx, w, d, c, w_max):
    """Weighted-mean update of the voxels ``idx`` (unique) from aggregated sums."""
    w0 = weight[idx]
    tot = w0 + w
    tsdf[idx] = (w0 * tsdf[idx] + d) / tot
    color[idx] = (w0[:, None] * color[idx] + c) / tot[:, None]
    weight[idx] = np.minimum(tot, w_max)


def _aggregate(keys, w, d, c):
    uk, inv = np.unique(keys, return_inverse=True)
    n = len(uk)
    sw = np.bincount(inv, w, n)
    swd = np.bincount(inv, w * d, n)
    swc = np.stack([np.bincount(inv, w * c[:, a], n) for a in range(3)], axis=1)
    return uk, sw, swd, swc


class Integrator:
    def __init__(self, vmap: VoxelMap, policy: QualityPolicy | None = None,
                 config: IntegratorConfig | None = None, complexity: ComplexityConfig | None = None):
        self.map = vmap
        self.policy = policy or vmap.policy
        vmap.policy = self.policy
        self.config = config or IntegratorConfig()
        self.complexity = complexity or ComplexityConfig()
        self.tau = self.config.tau(vmap)

    # single-ray entry point, mostly for tests and small scripts
    def integrate_ray(self, origin, point, weight: float, levels, color=(0, 0, 0),
                      evidence: dict | None = None, cc: float | None = None) -> int:
        origin = np.asarray(origin, dtype=float)
        b = Bundles(np.asarray(point, dtype=float).reshape(1, 3), np.asarray(color, float).reshape(1, 3),
                    np.array([float(weight)]), np.array([np.nan if cc is None else cc]),
                    np.array([0.0 if cc is None else float(weight)]),
                    np.array([0, len(evidence or {})]),
                    np.array(sorted(evidence or {}), dtype=np.int64),
                    np.array([evidence[k] for k in sorted(evidence or {})], dtype=float),
                    np.array([0]))
        touched: list[np.ndarray] = []
        n = 0
        for lvl in sorted(int(l) for l in levels):
            n += self._cast(origin, b, lvl, touched)
        return n

    def _fresh_split(self, flat: np.ndarray):
        lvl = int(self.policy.default_level)
        if lvl == 0 or len(flat) == 0:
            return
        m = self.map
        flat = np.unique(flat)
        fresh = flat[(m.weight[flat] == 0) & (m.child_level[flat] == 0) & (m.wg[flat] == 0)]
        for f in fresh.tolist():
            if f not in m.semantics:
                m.split_cell(f, lvl, int(SplitCause.SEMANTIC))

    def _cast(self, origin, bundles: Bundles, level: int, touched: list) -> int:
        m, tau, cfg = self.map, self.tau, self.config
        vc = m.sizes.coarse
        if len(bundles) == 0:
            return 0
        if level == 0:
            ray, ijk = band_voxels(origin, bundles.positions, vc, tau)
            flat = m.cell_ids(ijk, allocate=True)
            self._fresh_split(flat)
            d = projective_sdf(bundles.positions, origin, ijk, ray, vc, tau)
            uk, sw, swd, swc = _aggregate(flat, bundles.weights[ray], d, bundles.colors[ray])
            _fuse(m.tsdf, m.weight, m.color, uk, sw, swd, swc, cfg.w_max)
            touched.append(uk)
            self._update_band(ray, flat, bundles)
            return len(uk)
        # only rays crossing a cell refined to this level descend into it
        ray_c, ijk_c = band_voxels(origin, bundles.positions, vc, tau)
        flat_c = m.cell_ids(ijk_c, allocate=True)
        self._fresh_split(flat_c)
        touched.append(flat_c)
        hit = np.zeros(len(bundles), dtype=bool)
        hit[ray_c[m.child_level[flat_c] == level]] = True
        rays = np.flatnonzero(hit)
        if len(rays) == 0:
            return 0
        v = m.sizes.size(level)
        r_axis = m.R[level]
        sub_ray, ijk = band_voxels(origin, bundles.positions[rays], v, tau)
        ray = rays[sub_ray]
        cell = np.floor_divide(ijk, r_axis)
        flat = m.cell_ids(cell, allocate=True)
        self._fresh_split(flat)
        touched.append(flat)
        keep = m.child_level[flat] == level
        ray, ijk, cell, flat = ray[keep], ijk[keep], cell[keep], flat[keep]
        if len(ray) == 0:
            return 0
        local = ijk - cell * r_axis
        child = (local[:, 0] * r_axis + local[:, 1]) * r_axis + local[:, 2]
        pool = m.pools[level]
        slot = m.child_slot[flat]
        d = projective_sdf(bundles.positions, origin, ijk, ray, v, tau)
        uk, sw, swd, swc = _aggregate(slot * pool.n + child, bundles.weights[ray], d, bundles.colors[ray])
        us, uc = np.divmod(uk, pool.n)
        tsdf = pool.tsdf.reshape(-1)
        weight = pool.weight.reshape(-1)
        color = pool.color.reshape(-1, 3)
        flat_idx = us * pool.n + uc
        _fuse(tsdf, weight, color, flat_idx, sw, swd, swc, cfg.w_max)
        pool.observed.reshape(-1)[flat_idx] = True
        return len(uk)

    def _update_band(self, ray, flat, bundles: Bundles):
        """Semantic and complexity fusion on coarse voxels inside the surface band."""
        m = self.map
        band = np.abs(m.tsdf[flat]) < m.sizes.coarse
        ray, flat = ray[band], flat[band]
        if len(ray) == 0:
            return
        # complexity
        has = bundles.cc_weight[ray] > 0
        if has.any():
            uk, inv = np.unique(flat[has], return_inverse=True)
            w = np.bincount(inv, bundles.cc_weight[ray[has]], len(uk))
            c = np.bincount(inv, bundles.cc_weight[ray[has]] * bundles.cc[ray[has]], len(uk))
            m.g[uk] = (m.wg[uk] * m.g[uk] + c) / (m.wg[uk] + w)
            m.wg[uk] = np.minimum(m.wg[uk] + w, self.config.w_max)
        # semantics: expand each (voxel, ray) sample into the ray's evidence entries
        counts = bundles.ev_start[ray + 1] - bundles.ev_start[ray]
        total = int(counts.sum())
        if total == 0:
            return
        first = np.repeat(bundles.ev_start[ray] - (np.cumsum(counts) - counts), counts)
        e = first + np.arange(total)
        vox = np.repeat(flat, counts)
        key = vox * (1 << 20) + bundles.ev_label[e]
        uk, inv = np.unique(key, return_inverse=True)
        delta = np.bincount(inv, bundles.ev_delta[e], len(uk))
        vflat, vlab = np.divmod(uk, 1 << 20)
        bounds = np.flatnonzero(np.diff(vflat)) + 1
        for fs, ls, ds in zip(np.split(vflat, bounds), np.split(vlab, bounds), np.split(delta, bounds)):
            f = int(fs[0])
            ev = dict(zip(ls.tolist(), ds.tolist()))
            m.set_semantics(f, apply_evidence(m.semantics_of(f), ev))

    def integrate_frame(self, frame: Frame) -> FrameStats:
        t0 = time.perf_counter()
        frame.validate()
        m, cfg = self.map, self.config
        if np.any(frame.labels >= m.n_labels):
            raise ValueError(f"frame {frame.frame_id}: label id outside 0..{m.n_labels - 1}")
        stats = FrameStats(frame_id=frame.frame_id)
        pc = project_frame(frame, cfg.min_depth, cfg.max_ray_length)
        stats.points = len(pc)
        if len(pc) == 0:
            stats.time_ms = 1e3 * (time.perf_counter() - t0)
            return stats
        if self.policy.use_geometry:
            cc = estimate_frame_complexity(frame.depth, pc.pixel, pc.positions, self.complexity)
        else:
            cc = np.full(len(pc), np.nan)
        evidence = point_evidence(pc, m.n_labels)
        origin = frame.origin.astype(float)
        touched: list[np.ndarray] = []
        grids = {}
        for lvl in (0, 1, 2):
            if lvl and len(m.pools[lvl]) == 0 and self.policy.default_level < lvl:
                continue
            cell = cfg.alpha * m.sizes.size(0 if cfg.single_grid else lvl)
            if cell not in grids:
                grids[cell] = bundle_points(pc, cell, cc, evidence)
            bundles = grids[cell]
            stats.rays[lvl] = len(bundles)
            stats.voxels_updated += self._cast(origin, bundles, lvl, touched)
        if touched:
            stats.split, stats.merged = m.sweep(np.concatenate(touched), self.policy, cfg.neighbor_split)
        stats.time_ms = 1e3 * (time.perf_counter() - t0)
        return stats
