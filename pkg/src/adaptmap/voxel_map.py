"""Block-hashed hierarchical TSDF map.

Storage is struct-of-arrays: every coarse cell owns one slot in flat arrays
indexed by ``block_id * B**3 + local``, and split cells point into a per-level
pool of dense child arrays.  Semantics live only on coarse cells.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .policy import LevelSizes, QualityLevel, QualityPolicy, SplitCause
from .semantics import SemanticDistribution, best_label

_OFF = 1 << 20
_MASK = (1 << 21) - 1

OFFSETS26 = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                      if (i, j, k) != (0, 0, 0)], dtype=np.int64)


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64) + _OFF
    return (ijk[..., 0] << 42) | (ijk[..., 1] << 21) | ijk[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> 42) & _MASK, (keys >> 21) & _MASK, keys & _MASK], axis=-1) - _OFF


class Transition(Enum):
    SPLIT = "split"
    MERGED = "merged"
    UNCHANGED = "unchanged"


class ChildPool:
    """Dense child-voxel arrays for one quality level, addressed by slot."""

    def __init__(self, per_axis: int, capacity: int = 16):
        self.per_axis = per_axis
        self.n = per_axis ** 3
        self.tsdf = np.zeros((capacity, self.n))
        self.weight = np.zeros((capacity, self.n))
        self.color = np.zeros((capacity, self.n, 3), dtype=np.float32)
        # set once a child receives a measurement at its own resolution
        self.observed = np.zeros((capacity, self.n), dtype=bool)
        self.owner = np.full(capacity, -1, dtype=np.int64)
        self.used = 0
        self._free: list[int] = []

    def __len__(self):
        return self.used - len(self._free)

    def alloc(self, owner: int) -> int:
        if self._free:
            slot = self._free.pop()
        else:
            if self.used == len(self.owner):
                cap = 2 * len(self.owner)
                self.tsdf = _grow(self.tsdf, cap)
                self.weight = _grow(self.weight, cap)
                self.color = _grow(self.color, cap)
                self.observed = _grow(self.observed, cap)
                self.owner = _grow(self.owner, cap, -1)
            slot = self.used
            self.used += 1
        self.owner[slot] = owner
        return slot

    def release(self, slot: int):
        self.owner[slot] = -1
        self.tsdf[slot] = 0.0
        self.weight[slot] = 0.0
        self.color[slot] = 0.0
        self.observed[slot] = False
        self._free.append(slot)


def _grow(a: np.ndarray, cap: int, fill=0) -> np.ndarray:
    out = np.full((cap,) + a.shape[1:], fill, dtype=a.dtype)
    out[: len(a)] = a
    return out


@dataclass
class Voxel:
    tsdf: float
    weight: float
    color: tuple
    g: float
    w_g: float
    semantics: SemanticDistribution


class Cell:
    """Reference to one coarse cell of a map."""

    def __init__(self, vmap: "VoxelMap", flat: int):
        self.map = vmap
        self.flat = int(flat)

    def __eq__(self, other):
        return isinstance(other, Cell) and other.map is self.map and other.flat == self.flat

    def __hash__(self):
        return hash((id(self.map), self.flat))

    @property
    def coords(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.map.cell_coords(np.array([self.flat]))[0])

    @property
    def voxel(self) -> Voxel:
        m, f = self.map, self.flat
        return Voxel(float(m.tsdf[f]), float(m.weight[f]), tuple(float(c) for c in m.color[f]),
                     float(m.g[f]), float(m.wg[f]), m.semantics_of(f))

    @property
    def children_level(self) -> QualityLevel | None:
        lvl = int(self.map.child_level[self.flat])
        return QualityLevel(lvl) if lvl else None

    @property
    def split_cause(self) -> SplitCause:
        return SplitCause(int(self.map.cause[self.flat]))

    def children(self):
        """(tsdf, weight, color) arrays shaped (R, R, R[, 3]) or None when unsplit."""
        lvl = int(self.map.child_level[self.flat])
        if not lvl:
            return None
        pool = self.map.pools[lvl]
        slot = self.map.child_slot[self.flat]
        r = pool.per_axis
        return (pool.tsdf[slot].reshape(r, r, r), pool.weight[slot].reshape(r, r, r),
                pool.color[slot].reshape(r, r, r, 3))


class VoxelMap:
    def __init__(self, sizes: LevelSizes | None = None, n_labels: int = 40, block_size: int = 8,
                 policy: QualityPolicy | None = None):
        self.sizes = sizes or LevelSizes()
        self.n_labels = int(n_labels)
        self.B = int(block_size)
        self.B3 = self.B ** 3
        self.policy = policy or QualityPolicy()
        # "volume": children share the parent weight evenly, "copy": each child gets all of it
        self.split_weight = "volume"
        self.R = [1] + [self.sizes.children_per_axis(l) for l in (1, 2)]
        self._block_ids: dict[int, int] = {}
        self.block_index = np.zeros((0, 3), dtype=np.int64)
        self.n_blocks = 0
        self._alloc_cells(0)
        self.semantics: dict[int, SemanticDistribution] = {}
        self.pools = {1: ChildPool(self.R[1]), 2: ChildPool(self.R[2])}

    # ------------------------------------------------------------------ storage
    def _alloc_cells(self, cap_blocks: int):
        n = cap_blocks * self.B3
        self.tsdf = np.zeros(n)
        self.weight = np.zeros(n)
        self.color = np.zeros((n, 3), dtype=np.float32)
        self.g = np.zeros(n)
        self.wg = np.zeros(n)
        self.child_level = np.zeros(n, dtype=np.int8)
        self.cause = np.zeros(n, dtype=np.int8)
        self.child_slot = np.full(n, -1, dtype=np.int64)
        self.best_label = np.full(n, -1, dtype=np.int64)
        self.best_prob = np.zeros(n)
        self.block_index = np.zeros((cap_blocks, 3), dtype=np.int64)

    _CELL_ARRAYS = ("tsdf", "weight", "color", "g", "wg", "child_level", "cause", "child_slot",
                    "best_label", "best_prob")

    def _ensure_capacity(self, n_blocks: int):
        cap = len(self.block_index)
        if n_blocks <= cap:
            return
        new_cap = max(n_blocks, 2 * cap, 8)
        fills = {"child_slot": -1, "best_label": -1}
        for name in self._CELL_ARRAYS:
            setattr(self, name, _grow(getattr(self, name), new_cap * self.B3, fills.get(name, 0)))
        self.block_index = _grow(self.block_index, new_cap)

    @property
    def n_cells(self) -> int:
        return self.n_blocks * self.B3

    def block_ids(self, block_coords: np.ndarray, allocate: bool = False) -> np.ndarray:
        block_coords = np.asarray(block_coords, dtype=np.int64).reshape(-1, 3)
        if len(block_coords) == 0:
            return np.zeros(0, dtype=np.int64)
        keys = pack_keys(block_coords)
        uniq, inv = np.unique(keys, return_inverse=True)
        ids = np.empty(len(uniq), dtype=np.int64)
        get = self._block_ids.get
        for n, key in enumerate(uniq.tolist()):
            bid = get(key, -1)
            if bid < 0 and allocate:
                bid = self.n_blocks
                self._ensure_capacity(bid + 1)
                self._block_ids[key] = bid
                self.block_index[bid] = unpack_keys(np.array(key))
                self.n_blocks += 1
            ids[n] = bid
        return ids[inv]

    def cell_ids(self, cell_coords: np.ndarray, allocate: bool = False) -> np.ndarray:
        """Flat ids of coarse cells by integer coordinates (-1 where unallocated)."""
        cell_coords = np.asarray(cell_coords, dtype=np.int64).reshape(-1, 3)
        blocks = np.floor_divide(cell_coords, self.B)
        local = cell_coords - blocks * self.B
        bids = self.block_ids(blocks, allocate)
        flat = bids * self.B3 + (local[:, 0] * self.B + local[:, 1]) * self.B + local[:, 2]
        return np.where(bids >= 0, flat, -1)

    def cell_coords(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        bid, local = np.divmod(flat, self.B3)
        x, rest = np.divmod(local, self.B * self.B)
        y, z = np.divmod(rest, self.B)
        return self.block_index[bid] * self.B + np.stack([x, y, z], axis=-1)

    def cell_of_position(self, position) -> np.ndarray:
        return np.floor(np.asarray(position, dtype=float) / self.sizes.coarse).astype(np.int64)

    def allocate_cell(self, position) -> Cell:
        position = np.asarray(position, dtype=float)
        if not np.all(np.isfinite(position)):
            raise ValueError("position must be finite")
        return Cell(self, int(self.cell_ids(self.cell_of_position(position)[None], allocate=True)[0]))

    def get_cell(self, position) -> Cell | None:
        flat = int(self.cell_ids(self.cell_of_position(position)[None])[0])
        return Cell(self, flat) if flat >= 0 else None

    def cell_at(self, coords) -> Cell | None:
        flat = int(self.cell_ids(np.asarray(coords)[None])[0])
        return Cell(self, flat) if flat >= 0 else None

    def cells(self, flat=None) -> list[Cell]:
        if flat is None:
            flat = range(self.n_cells)
        return [Cell(self, f) for f in flat]

    def active_cells(self) -> np.ndarray:
        """Flat ids of cells carrying any state (observed, split or labelled)."""
        n = self.n_cells
        mask = (self.weight[:n] > 0) | (self.child_level[:n] > 0) | (self.wg[:n] > 0)
        mask[list(self.semantics)] = True
        return np.flatnonzero(mask)

    # ---------------------------------------------------------------- semantics
    def semantics_of(self, flat: int) -> SemanticDistribution:
        dist = self.semantics.get(int(flat))
        return dist.copy() if dist is not None else SemanticDistribution.fresh(self.n_labels)

    def set_semantics(self, flat: int, dist: SemanticDistribution):
        flat = int(flat)
        self.semantics[flat] = dist
        best = best_label(dist)
        if best is None:
            self.best_label[flat], self.best_prob[flat] = -1, 0.0
        else:
            self.best_label[flat], self.best_prob[flat] = best

    # ------------------------------------------------------------- split/merge
    def target_levels(self, flat: np.ndarray, policy: QualityPolicy | None = None):
        """Vectorised target level and the cause that drives it."""
        policy = policy or self.policy
        flat = np.asarray(flat, dtype=np.int64)
        table = policy.level_table(self.n_labels)
        sem = table[np.where(self.best_label[flat] >= 0, self.best_label[flat], self.n_labels)]
        if policy.use_geometry:
            g = self.g[flat]
            geo = np.where(g >= policy.theta_fine, 2, np.where(g >= policy.theta_middle, 1, 0))
            geo = np.where(self.wg[flat] > 0, geo, 0).astype(np.int8)
        else:
            geo = np.zeros_like(sem)
        level = np.maximum(sem, geo)
        cause = np.where(sem >= geo, int(SplitCause.SEMANTIC), int(SplitCause.GEOMETRIC))
        return level.astype(np.int8), np.where(level > 0, cause, 0).astype(np.int8)

    def target_level(self, cell: Cell, policy: QualityPolicy | None = None) -> QualityLevel:
        return QualityLevel(int(self.target_levels(np.array([cell.flat]), policy)[0][0]))

    def split_cell(self, flat: int, level: int, cause: int) -> bool:
        cur = int(self.child_level[flat])
        if level <= cur:
            return False
        pool = self.pools[level]
        slot = pool.alloc(flat)
        if cur == 0:
            pool.tsdf[slot] = self.tsdf[flat]
            pool.weight[slot] = self.weight[flat] * self.child_weight_share(pool.n)
            pool.color[slot] = self.color[flat]
        else:
            old = self.pools[cur]
            k = pool.per_axis // old.per_axis
            r = old.per_axis
            old_slot = self.child_slot[flat]
            for arr_new, arr_old in ((pool.tsdf, old.tsdf), (pool.weight, old.weight)):
                a = arr_old[old_slot].reshape(r, r, r)
                arr_new[slot] = a.repeat(k, 0).repeat(k, 1).repeat(k, 2).ravel()
            pool.weight[slot] *= self.child_weight_share(k ** 3)
            c = old.color[old_slot].reshape(r, r, r, 3)
            pool.color[slot] = c.repeat(k, 0).repeat(k, 1).repeat(k, 2).reshape(-1, 3)
            old.release(old_slot)
        self.child_level[flat] = level
        self.child_slot[flat] = slot
        self.cause[flat] = cause
        return True

    def child_weight_share(self, n_children: int) -> float:
        return 1.0 / n_children if self.split_weight == "volume" else 1.0

    def _coarsen_cell(self, flat: int, level: int):
        cur = int(self.child_level[flat])
        old = self.pools[cur]
        old_slot = self.child_slot[flat]
        if level == 0:
            old.release(old_slot)
            self.child_level[flat] = 0
            self.child_slot[flat] = -1
            self.cause[flat] = int(SplitCause.NONE)
            return
        pool = self.pools[level]
        slot = pool.alloc(flat)
        r, k = pool.per_axis, old.per_axis // pool.per_axis

        def blocks(a):
            tail = a.shape[1:]
            axes = (0, 2, 4, 1, 3, 5) + tuple(range(6, 6 + len(tail)))
            return a.reshape(r, k, r, k, r, k, *tail).transpose(axes).reshape(r, r, r, k ** 3, *tail)

        w = blocks(old.weight[old_slot])
        t = blocks(old.tsdf[old_slot])
        c = blocks(old.color[old_slot].astype(np.float64))
        ws = w.sum(axis=3)
        safe = np.where(ws > 0, ws, 1.0)
        pool.tsdf[slot] = np.where(ws > 0, (w * t).sum(axis=3) / safe, self.tsdf[flat]).ravel()
        # volume shares add back up; copied weights average
        pool.weight[slot] = (ws if self.split_weight == "volume" else ws / k ** 3).ravel()
        pool.observed[slot] = blocks(old.observed[old_slot]).any(axis=3).ravel()
        pool.color[slot] = np.where((ws > 0)[..., None], (w[..., None] * c).sum(axis=3) / safe[..., None],
                                    self.color[flat]).reshape(-1, 3)
        old.release(old_slot)
        self.child_level[flat] = level
        self.child_slot[flat] = slot

    def apply_level_transition(self, cell: Cell, level: int, policy: QualityPolicy | None = None,
                               cause: int = SplitCause.SEMANTIC) -> Transition:
        policy = policy or self.policy
        flat = cell.flat
        cur = int(self.child_level[flat])
        level = int(level)
        if level > cur:
            self.split_cell(flat, level, int(cause))
            return Transition.SPLIT
        if level < cur:
            if (self.cause[flat] != SplitCause.NEIGHBOR and self.best_label[flat] >= 0
                    and self.best_prob[flat] >= policy.merge_confidence):
                self._coarsen_cell(flat, level)
                return Transition.MERGED
            return Transition.UNCHANGED
        if cur and self.cause[flat] == SplitCause.NEIGHBOR and cause != SplitCause.NEIGHBOR:
            # the cell now justifies its own level
            self.cause[flat] = int(cause)
        return Transition.UNCHANGED

    def neighbor_ids(self, flat: np.ndarray, allocate: bool = False) -> np.ndarray:
        coords = self.cell_coords(np.asarray(flat, dtype=np.int64).reshape(-1))
        nb = coords[:, None, :] + OFFSETS26[None]
        return self.cell_ids(nb.reshape(-1, 3), allocate).reshape(-1, 26)

    def propagate_neighbor_split(self, cell_or_coords, level: int) -> int:
        if isinstance(cell_or_coords, Cell):
            flat = np.array([cell_or_coords.flat])
        else:
            flat = self.cell_ids(np.asarray(cell_or_coords)[None], allocate=True)
        return self._propagate(flat, np.array([level], dtype=np.int8))

    def _propagate(self, flat: np.ndarray, levels: np.ndarray) -> int:
        if len(flat) == 0:
            return 0
        nb = self.neighbor_ids(flat, allocate=True)
        need = np.repeat(levels, 26).reshape(-1, 26)
        todo = self.child_level[nb] < need
        count = 0
        # highest level first so a cell wanted at several levels is split once
        order = np.argsort(-need[todo], kind="stable")
        for f, lvl in zip(nb[todo][order].tolist(), need[todo][order].tolist()):
            if self.child_level[f] < lvl:
                self.split_cell(f, lvl, int(SplitCause.NEIGHBOR))
                count += 1
        return count

    def _release_neighbor_causes(self, flat: np.ndarray, targets: np.ndarray):
        cand = flat[(self.cause[flat] == SplitCause.NEIGHBOR) & (targets < self.child_level[flat])]
        if len(cand) == 0:
            return
        nb = self.neighbor_ids(cand)
        lvl = np.where(nb >= 0, self.child_level[np.maximum(nb, 0)], 0)
        own = np.where(nb >= 0, self.cause[np.maximum(nb, 0)], 0) != SplitCause.NEIGHBOR
        held = ((lvl >= self.child_level[cand][:, None]) & own & (nb >= 0)).any(axis=1)
        self.cause[cand[~held]] = int(SplitCause.NONE)

    def sweep(self, touched: np.ndarray, policy: QualityPolicy | None = None,
              neighbor_split: bool = True) -> tuple[int, int]:
        """Re-evaluate the level of every touched cell; returns (splits, merges)."""
        policy = policy or self.policy
        flat = np.unique(np.asarray(touched, dtype=np.int64))
        if len(flat) == 0:
            return 0, 0
        targets, causes = self.target_levels(flat, policy)
        self._release_neighbor_causes(flat, targets)
        cur = self.child_level[flat]
        act = (targets != cur) | ((cur > 0) & (self.cause[flat] == SplitCause.NEIGHBOR))
        n_split = n_merge = 0
        for f, t, c in zip(flat[act].tolist(), targets[act].tolist(), causes[act].tolist()):
            res = self.apply_level_transition(Cell(self, f), t, policy, c)
            n_split += res is Transition.SPLIT
            n_merge += res is Transition.MERGED
        if neighbor_split:
            src = flat[(self.child_level[flat] > 0) & (self.cause[flat] != SplitCause.NEIGHBOR)]
            n_split += self._propagate(src, self.child_level[src])
        return n_split, n_merge

    # ------------------------------------------------------------------ memory
    def memory_bytes(self) -> int:
        return map_memory_bytes(self)

    def level_volume_fractions(self) -> dict[QualityLevel, float]:
        """Share of represented volume per level, voxel counts scaled by voxel volume."""
        active = self.active_cells()
        lvl = self.child_level[active]
        vols = {}
        for level in (QualityLevel.COARSE, QualityLevel.MIDDLE, QualityLevel.FINE):
            n_vox = np.count_nonzero(lvl == level) * self.R[level] ** 3
            vols[level] = n_vox * self.sizes.size(level) ** 3
        total = sum(vols.values())
        return {k: (100.0 * v / total if total else 0.0) for k, v in vols.items()}


# Compact per-record costs used for the memory report (float32 scalars, u8 colour).
HEADER_BYTES = 64
BLOCK_BYTES = 32  # 3 x i64 index + hash-table slot
VOXEL_BYTES = 11  # tsdf f32, weight f32, rgb u8x3
COARSE_EXTRA_BYTES = 22  # g, w_g, p_rem f32; children pointer 8; level + cause u8
LABEL_BYTES = 6  # u16 label + f32 probability
CHILD_ARRAY_BYTES = 16


def map_memory_bytes(vmap: VoxelMap) -> int:
    """Deterministic storage estimate.

    header + blocks * (BLOCK + B^3 * (VOXEL + COARSE_EXTRA))
           + stored labels * LABEL + sum over split cells (CHILD_ARRAY + R^3 * VOXEL)
    """
    total = HEADER_BYTES + vmap.n_blocks * (BLOCK_BYTES + vmap.B3 * (VOXEL_BYTES + COARSE_EXTRA_BYTES))
    total += LABEL_BYTES * sum(len(d.labels) for d in vmap.semantics.values())
    for lvl, pool in vmap.pools.items():
        total += len(pool) * (CHILD_ARRAY_BYTES + pool.n * VOXEL_BYTES)
    return int(total)
