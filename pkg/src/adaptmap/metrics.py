"""Reconstruction metrics: completion, accuracy, semantics, memory and timing."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesher import NO_LABEL, Mesh
from .policy import QualityLevel, QualityPolicy
from .scene_synth import LabeledPoints
from .voxel_map import VoxelMap

RATIO_THRESHOLD = 0.05  # meters
LEVEL_NAMES = {QualityLevel.FINE: "fine", QualityLevel.MIDDLE: "middle", QualityLevel.COARSE: "coarse"}


class NoOverlap(ValueError):
    pass


def _exact(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.sqrt(((q - p) ** 2).sum(axis=-1))


def nearest(queries, points) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbour of each query; ties go to the lowest point index."""
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return np.full(len(queries), np.inf), np.full(len(queries), -1, dtype=np.int64)
    if len(queries) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    tree = cKDTree(points)
    k = min(4, len(points))
    _, idx = tree.query(queries, k=k)
    idx = idx.reshape(len(queries), k)
    d = _exact(queries[:, None, :], points[idx])
    best_d = d.min(axis=1)
    # among exact minima pick the lowest index
    cand = np.where(d == best_d[:, None], idx, np.iinfo(np.int64).max)
    best_i = cand.min(axis=1)
    # more equal-distance points may hide beyond the k candidates
    crowded = np.flatnonzero(d.max(axis=1) <= best_d * (1 + 1e-9) + 1e-15) if k < len(points) else []
    for qi in np.asarray(crowded).tolist():
        near = tree.query_ball_point(queries[qi], best_d[qi] * (1 + 1e-6) + 1e-12)
        near = np.array(sorted(near), dtype=np.int64)
        dd = _exact(queries[qi], points[near])
        j = np.flatnonzero(dd == dd.min())[0]
        best_d[qi], best_i[qi] = dd[j], near[j]
    return best_d, best_i


def _stats_cm(d: np.ndarray) -> tuple[float, float]:
    if len(d) == 0:
        return math.inf, math.inf
    return float(100.0 * d.mean()), float(100.0 * d.std())


def completion_error(gt_points, recon_points) -> tuple[float, float]:
    """Mean/std distance (cm) from every GT point to the reconstruction."""
    if len(recon_points) == 0:
        return math.inf, math.inf
    return _stats_cm(nearest(gt_points, recon_points)[0])


def completion_ratio(gt_points, recon_points, threshold: float = RATIO_THRESHOLD) -> float:
    if len(recon_points) == 0 or len(gt_points) == 0:
        return 0.0
    d = nearest(gt_points, recon_points)[0]
    return float(100.0 * np.count_nonzero(d < threshold) / len(d))


def geometric_error(recon_points, gt_points) -> tuple[float, float]:
    """Mean/std distance (cm) from every reconstructed point to the GT."""
    if len(gt_points) == 0:
        return math.inf, math.inf
    return _stats_cm(nearest(recon_points, gt_points)[0])


def partition_by_level(points, gt_points, gt_labels, policy: QualityPolicy):
    """Index subsets per level: recon points take the level of their nearest GT point."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_level = np.array([int(policy.semantic_level(int(l))) for l in gt_labels], dtype=np.int64)
    _, nn = nearest(points, gt_points)
    rec_level = gt_level[nn] if len(nn) and len(gt_level) else np.zeros(len(nn), np.int64)
    return {lvl: (np.flatnonzero(rec_level == lvl), np.flatnonzero(gt_level == lvl))
            for lvl in (QualityLevel.FINE, QualityLevel.MIDDLE, QualityLevel.COARSE)}


def sample_mesh(mesh: Mesh, density: float, seed: int = 0) -> LabeledPoints:
    """Area-weighted uniform samples; label of the vertex with the largest barycentric weight."""
    if not density > 0:
        raise ValueError("density must be positive")
    if len(mesh.triangles) == 0:
        return LabeledPoints(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    area = mesh.areas()
    total = float(area.sum())
    n = int(round(total * density))
    if n == 0 or total <= 0:
        return LabeledPoints(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    v = mesh.vertices[mesh.triangles[tri]]
    pts = (bary[:, :, None] * v).sum(axis=1)
    corner = mesh.triangles[tri, np.argmax(bary, axis=1)]
    labels = mesh.labels[corner].astype(np.int64)
    return LabeledPoints(pts, np.where(labels == NO_LABEL, -1, labels))


def gt_voxel_labels(points, labels, voxel_size: float):
    """Majority GT label per coarse cell (ties to the lowest label)."""
    cells = np.floor(np.asarray(points) / voxel_size).astype(np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(cells) == 0:
        return np.zeros((0, 3), np.int64), np.zeros(0, np.int64)
    rows = np.column_stack([cells, labels])
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    # sort by cell, then count descending, then label ascending
    order = np.lexsort((uniq[:, 3], -counts, uniq[:, 2], uniq[:, 1], uniq[:, 0]))
    uniq = uniq[order]
    first = np.ones(len(uniq), dtype=bool)
    first[1:] = np.any(uniq[1:, :3] != uniq[:-1, :3], axis=1)
    return uniq[first, :3], uniq[first, 3]


def confusion_scores(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(accuracy %, mIoU %) for paired voxel labels; pred -1 means no prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if len(gt) == 0:
        raise NoOverlap("no voxel has both a prediction and ground truth")
    acc = 100.0 * np.count_nonzero(pred == gt) / len(gt)
    classes = np.union1d(gt, pred[pred >= 0])
    ious = []
    for c in classes.tolist():
        tp = np.count_nonzero((pred == c) & (gt == c))
        fp = np.count_nonzero((pred == c) & (gt != c))
        fn = np.count_nonzero((pred != c) & (gt == c))
        ious.append(tp / (tp + fp + fn))
    return float(acc), float(100.0 * np.mean(ious))


def semantic_scores(vmap: VoxelMap, gt_cells: np.ndarray, gt_labels: np.ndarray) -> tuple[float, float]:
    """Accuracy and mIoU over observed coarse voxels that carry a GT label."""
    flat = vmap.cell_ids(gt_cells)
    ok = flat >= 0
    ok[ok] = vmap.weight[flat[ok]] > 0
    return confusion_scores(vmap.best_label[flat[ok]], np.asarray(gt_labels)[ok])


@dataclass
class LevelReport:
    completion_error_mean: float = math.inf
    completion_error_std: float = math.inf
    completion_ratio_5cm: float = 0.0
    geometric_error_mean: float = math.inf
    geometric_error_std: float = math.inf
    n_gt: int = 0
    n_recon: int = 0


@dataclass
class EvalReport:
    levels: dict = field(default_factory=dict)  # level name -> LevelReport
    semantic_accuracy: float = math.nan
    semantic_miou: float = math.nan
    map_size_bytes: int = 0
    integrate_time_mean_ms: float = math.nan
    integrate_time_std_ms: float = math.nan
    mesh_time_ms: float = math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = {k: asdict(v) for k, v in self.levels.items()}
        return d

    def rows(self) -> list[tuple[str, str, float]]:
        """(scope, key, value) rows for the delimited table."""
        out = []
        for name, rep in self.levels.items():
            out += [(name, k, v) for k, v in asdict(rep).items()]
        for k in ("semantic_accuracy", "semantic_miou", "map_size_bytes", "integrate_time_mean_ms",
                  "integrate_time_std_ms", "mesh_time_ms"):
            out.append(("overall", k, getattr(self, k)))
        return out


def level_metrics(recon: np.ndarray, gt: LabeledPoints, policy: QualityPolicy) -> dict:
    parts = partition_by_level(recon, gt.positions, gt.labels, policy)
    out = {}
    for lvl, (ri, gi) in parts.items():
        r, g = recon[ri], gt.positions[gi]
        rep = LevelReport(n_gt=len(g), n_recon=len(r))
        if len(g):
            rep.completion_error_mean, rep.completion_error_std = completion_error(g, r)
            rep.completion_ratio_5cm = completion_ratio(g, r)
        if len(r) and len(g):
            rep.geometric_error_mean, rep.geometric_error_std = geometric_error(r, g)
        out[LEVEL_NAMES[lvl]] = rep
    return out


def evaluate(vmap: VoxelMap, mesh: Mesh, gt: LabeledPoints, policy: QualityPolicy,
             frame_times_ms=None, mesh_time_ms: float = math.nan, density: float = 1e5,
             seed: int = 0) -> EvalReport:
    recon = sample_mesh(mesh, density, seed)
    rep = EvalReport(levels=level_metrics(recon.positions, gt, policy))
    cells, labels = gt_voxel_labels(gt.positions, gt.labels, vmap.sizes.coarse)
    try:
        rep.semantic_accuracy, rep.semantic_miou = semantic_scores(vmap, cells, labels)
    except NoOverlap:
        pass
    rep.map_size_bytes = vmap.memory_bytes()
    if frame_times_ms is not None and len(frame_times_ms):
        t = np.asarray(frame_times_ms, dtype=float)
        rep.integrate_time_mean_ms, rep.integrate_time_std_ms = float(t.mean()), float(t.std())
    rep.mesh_time_ms = float(mesh_time_ms)
    return rep
