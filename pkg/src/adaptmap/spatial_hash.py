"""Uniform hash grid for fixed-radius neighbour queries."""
from __future__ import annotations

import numpy as np

from .voxel_map import pack_keys

_OFFSETS27 = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
                      dtype=np.int64)


class HashGrid:
    """Points bucketed by ``floor(p / cell)``; a radius query with ``radius <= cell``
    only needs the 27 surrounding buckets."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.cell = float(cell)
        keys = pack_keys(np.floor(self.points / self.cell).astype(np.int64))
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def candidate_pairs(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        qcell = np.floor(queries / self.cell).astype(np.int64)
        qi_all, pj_all = [], []
        for off in _OFFSETS27:
            k = pack_keys(qcell + off)
            lo = np.searchsorted(self.keys, k, "left")
            hi = np.searchsorted(self.keys, k, "right")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            qi = np.repeat(np.arange(len(queries)), counts)
            first = np.repeat(lo - (np.cumsum(counts) - counts), counts)
            pj_all.append(self.order[first + np.arange(total)])
            qi_all.append(qi)
        if not qi_all:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(qi_all), np.concatenate(pj_all)

    def radius_pairs(self, queries: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """All (query index, point index) with squared distance <= radius**2, sorted."""
        if radius > self.cell:
            raise ValueError("radius larger than the grid cell")
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        qi, pj = self.candidate_pairs(queries)
        d2 = ((queries[qi] - self.points[pj]) ** 2).sum(axis=1)
        keep = d2 <= radius * radius
        qi, pj = qi[keep], pj[keep]
        order = np.lexsort((pj, qi))
        return qi[order], pj[order]
