"""Posed RGB-D frames with per-pixel top-k semantic observations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .semantics import CONFIDENCE_THRESHOLD

MAX_OBSERVATIONS = 4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 0
    height: int = 0

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("degenerate intrinsics: fx and fy must be positive")


@dataclass
class Frame:
    depth: np.ndarray  # (H, W) meters, 0 or NaN invalid
    color: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W, K) int, -1 where absent
    probs: np.ndarray  # (H, W, K) float, 0 where absent
    pose: np.ndarray  # (4, 4) camera -> world
    intrinsics: Intrinsics
    frame_id: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    def validate(self):
        self.intrinsics.validate()
        h, w = self.depth.shape
        if self.color.shape[:2] != (h, w) or self.labels.shape[:2] != (h, w) \
                or self.probs.shape != self.labels.shape:
            raise ValueError("depth, colour and semantics dimensions differ")
        if self.labels.shape[2] > MAX_OBSERVATIONS:
            raise ValueError("more than four observations per pixel")
        rot = self.pose[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("pose rotation is not orthonormal")
        present = self.labels >= 0
        if np.any(present & ((self.probs <= CONFIDENCE_THRESHOLD) | (self.probs > 1))):
            raise ValueError("observation probabilities must lie in (0.1, 1]")
        rising = np.diff(np.where(present, self.probs, -1.0), axis=2) >= 0
        if np.any(rising & present[..., 1:]):
            raise ValueError("per-pixel observation probabilities must be strictly descending")


def empty_semantics(h: int, w: int, k: int = 1):
    return np.full((h, w, k), -1, dtype=np.int32), np.zeros((h, w, k))


@dataclass
class PointCloud:
    """Projected frame points in world coordinates (struct of arrays)."""

    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    pixel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.positions)


def project_frame(frame: Frame, min_depth: float = 0.1, max_depth: float = 5.0) -> PointCloud:
    frame.intrinsics.validate()
    k = frame.intrinsics
    z = np.asarray(frame.depth, dtype=float)
    valid = np.isfinite(z) & (z > 0) & (z >= min_depth) & (z <= max_depth)
    pix = np.flatnonzero(valid)
    rows, cols = np.divmod(pix, z.shape[1])
    zz = z.ravel()[pix]
    cam = np.stack([(cols - k.cx) / k.fx * zz, (rows - k.cy) / k.fy * zz, zz], axis=1)
    world = cam @ frame.pose[:3, :3].T + frame.pose[:3, 3]
    kk = frame.labels.shape[2]
    return PointCloud(
        positions=world,
        colors=frame.color.reshape(-1, 3)[pix].astype(float),
        labels=frame.labels.reshape(-1, kk)[pix],
        probs=frame.probs.reshape(-1, kk)[pix],
        depth=zz,
        weights=1.0 / zz ** 2,
        pixel=pix,
    )
