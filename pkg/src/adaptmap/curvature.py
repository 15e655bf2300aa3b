"""Per-frame geometric complexity (change of curvature) and its voxel fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spatial_hash import HashGrid


class DegenerateNeighborhood(ValueError):
    pass


@dataclass
class ComplexityConfig:
    stride: int = 2
    radius: float = 0.1
    min_neighbors: int = 4

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


def subsample(depth: np.ndarray, stride: int = 2) -> np.ndarray:
    """Flat pixel indices of valid depth on the stride lattice (row-major)."""
    depth = np.asarray(depth)
    valid = np.isfinite(depth) & (depth > 0)
    lattice = np.zeros_like(valid)
    lattice[::stride, ::stride] = True
    return np.flatnonzero(valid & lattice)


def structure_tensor(center, neighbors, min_neighbors: int = 4) -> np.ndarray:
    center = np.asarray(center, dtype=float).reshape(1, 3)
    neighbors = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(neighbors) < min_neighbors:
        raise DegenerateNeighborhood(f"{len(neighbors)} neighbours < {min_neighbors}")
    pts = np.vstack([center, neighbors]) - center
    d = pts - pts.mean(axis=0)
    return d.T @ d / len(pts)


def _check_symmetric(m: np.ndarray):
    if m.shape[-2:] != (3, 3):
        raise ValueError("expected 3x3 matrices")
    if np.any(np.abs(m - np.swapaxes(m, -1, -2)) > 1e-9):
        raise ValueError("matrix is not symmetric")


def eigenvalues_sym3_batch(m: np.ndarray) -> np.ndarray:
    """Closed-form eigenvalues of symmetric 3x3 matrices, shape (..., 3) descending."""
    m = np.asarray(m, dtype=float)
    _check_symmetric(m)
    a00, a11, a22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    a01, a02, a12 = m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]
    q = (a00 + a11 + a22) / 3.0
    p1 = a01 ** 2 + a02 ** 2 + a12 ** 2
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    b00, b11, b22 = (a00 - q) / safe, (a11 - q) / safe, (a22 - q) / safe
    b01, b02, b12 = a01 / safe, a02 / safe, a12 / safe
    det = (b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02)
           + b02 * (b01 * b12 - b11 * b02))
    phi = np.arccos(np.clip(det / 2.0, -1.0, 1.0)) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    out = np.stack([e1, e2, e3], axis=-1)
    out = np.where((p > 0)[..., None], out, q[..., None])
    out = -np.sort(-out, axis=-1)
    return np.where((out < 0) & (out >= -1e-12), 0.0, out)


def eigenvalues_sym3(m) -> tuple[float, float, float]:
    e = eigenvalues_sym3_batch(np.asarray(m, dtype=float).reshape(3, 3))
    return float(e[0]), float(e[1]), float(e[2])


def change_of_curvature(l1: float, l2: float, l3: float) -> float:
    s = l1 + l2 + l3
    if s <= 0:
        return 0.0
    return min(max(l3 / s, 0.0), 1.0 / 3.0)


def change_of_curvature_batch(eigs: np.ndarray) -> np.ndarray:
    s = eigs.sum(axis=-1)
    cc = np.where(s > 0, eigs[..., 2] / np.where(s > 0, s, 1.0), 0.0)
    return np.clip(cc, 0.0, 1.0 / 3.0)


def integrate_complexity(g: float, w_g: float, cc: float, w: float, w_max: float):
    """Weighted running mean of complexity with a saturating weight."""
    if not w > 0:
        raise ValueError("observation weight must be positive")
    g_new = (w_g * g + w * cc) / (w_g + w)
    return g_new, min(w_g + w, w_max)


def neighborhood_covariances(points: np.ndarray, radius: float):
    """Covariance and neighbour count (self included) for every point."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    qi, pj = HashGrid(points, radius).radius_pairs(points, radius)
    n = np.bincount(qi, minlength=len(points)).astype(float)
    d = points[pj] - points[qi]
    s1 = np.stack([np.bincount(qi, d[:, a], len(points)) for a in range(3)], axis=1)
    s2 = np.empty((len(points), 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2[:, a, b] = s2[:, b, a] = np.bincount(qi, d[:, a] * d[:, b], len(points))
    nn = np.where(n > 0, n, 1.0)
    mean = s1 / nn[:, None]
    cov = s2 / nn[:, None, None] - mean[:, :, None] * mean[:, None, :]
    return cov, n.astype(np.int64)


def estimate_frame_complexity(depth: np.ndarray, pixel_index: np.ndarray, positions: np.ndarray,
                              config: ComplexityConfig | None = None) -> np.ndarray:
    """Change of curvature per projected point; NaN where none was computed.

    ``pixel_index`` gives the flat depth-pixel of each row in ``positions``.
    Only stride-lattice points are evaluated and only they form neighbourhoods.
    """
    config = config or ComplexityConfig()
    out = np.full(len(positions), np.nan)
    sub = np.isin(pixel_index, subsample(depth, config.stride))
    idx = np.flatnonzero(sub)
    if len(idx) == 0:
        return out
    cov, n = neighborhood_covariances(positions[idx], config.radius)
    ok = (n - 1) >= config.min_neighbors
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cc = change_of_curvature_batch(eigenvalues_sym3_batch(cov[ok]))
    out[idx[ok]] = cc
    return out
