"""Analytic test scenes: planes, spheres and axis-aligned boxes.

Scene files are plain text, one primitive per line, ``#`` starts a comment::

    plane  <label> <r> <g> <b>  <px> <py> <pz>  <nx> <ny> <nz>  <half_u> [<half_v>]
    sphere <label> <r> <g> <b>  <cx> <cy> <cz>  <radius>
    box    <label> <r> <g> <b>  <cx> <cy> <cz>  <hx> <hy> <hz>
    camera <width> <height> <fx> <fy> [<cx> <cy>]
    orbit  <radius> <height> [<tx> <ty> <tz>]
    labels <n_labels>

A plane is a rectangle; its in-plane axes come from :func:`plane_axes`.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .frame import Frame, Intrinsics


class SceneError(ValueError):
    pass


@dataclass
class ScenePrimitive:
    kind: str
    label: int
    color: tuple
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.kind == "plane":
            n = self.params[3:6]
            if abs(np.linalg.norm(n) - 1.0) > 1e-9:
                raise SceneError("plane normal must have unit length")
            if np.any(self.params[6:8] <= 0):
                raise SceneError("plane extent must be positive")
        elif self.kind == "sphere":
            if self.params[3] <= 0:
                raise SceneError("sphere radius must be positive")
        elif self.kind == "box":
            if np.any(self.params[3:6] <= 0):
                raise SceneError("box half extents must be positive")
        else:
            raise SceneError(f"unknown primitive {self.kind!r}")

    @property
    def center(self) -> np.ndarray:
        return self.params[:3]

    def area(self) -> float:
        p = self.params
        if self.kind == "plane":
            return 4.0 * p[6] * p[7]
        if self.kind == "sphere":
            return 4.0 * np.pi * p[3] ** 2
        hx, hy, hz = p[3:6]
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per direction (inf on a miss)."""
        p = self.params
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "plane":
                n = p[3:6]
                denom = dirs @ n
                t = ((p[:3] - origin) @ n) / denom
                hit = origin + t[:, None] * dirs - p[:3]
                u, v = plane_axes(n)
                ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(hit @ u) <= p[6]) & (np.abs(hit @ v) <= p[7])
                return np.where(ok, t, np.inf)
            if self.kind == "sphere":
                oc = origin - p[:3]
                a = (dirs * dirs).sum(1)
                b = dirs @ oc
                c = oc @ oc - p[3] ** 2
                disc = b * b - a * c
                sq = np.sqrt(np.maximum(disc, 0.0))
                t0 = (-b - sq) / a
                t1 = (-b + sq) / a
                t = np.where(t0 > 0, t0, t1)
                return np.where((disc >= 0) & (t > 0), t, np.inf)
            lo = (p[:3] - p[3:6] - origin) / dirs
            hi = (p[:3] + p[3:6] - origin) / dirs
            tn = np.nanmax(np.minimum(lo, hi), axis=1)
            tf = np.nanmin(np.maximum(lo, hi), axis=1)
            t = np.where(tn > 0, tn, tf)
            return np.where((tn <= tf) & (t > 0), t, np.inf)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        if self.kind == "plane":
            u, v = plane_axes(p[3:6])
            a = rng.uniform(-p[6], p[6], n)
            b = rng.uniform(-p[7], p[7], n)
            return p[:3] + a[:, None] * u + b[:, None] * v
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return p[:3] + p[3] * d
        h = p[3:6]
        face_area = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        axis, side = face // 2, np.where(face % 2, 1.0, -1.0)
        pts[np.arange(n), axis] = side * h[axis]
        return p[:3] + pts

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the primitive surface."""
        p = self.params
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(points - p[:3], axis=1) - p[3])
        if self.kind == "plane":
            u, v = plane_axes(p[3:6])
            d = points - p[:3]
            du = np.maximum(np.abs(d @ u) - p[6], 0.0)
            dv = np.maximum(np.abs(d @ v) - p[7], 0.0)
            return np.sqrt((d @ p[3:6]) ** 2 + du ** 2 + dv ** 2)
        q = np.abs(points - p[:3]) - p[3:6]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)


def plane_axes(normal) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


@dataclass
class Scene:
    primitives: list[ScenePrimitive]
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(200.0, 200.0, 79.5, 59.5, 160, 120))
    orbit_radius: float = 1.5
    orbit_height: float = 0.6
    target: np.ndarray | None = None
    n_labels: int = 40

    def centroid(self) -> np.ndarray:
        if self.target is not None:
            return np.asarray(self.target, dtype=float)
        return np.mean([p.center for p in self.primitives], axis=0)

    def distance(self, points) -> np.ndarray:
        return np.min([p.distance(points) for p in self.primitives], axis=0)


def parse_scene(text: str) -> Scene:
    prims, kw = [], {}
    arity = {"plane": 8, "sphere": 4, "box": 6}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] in arity:
                label, rgb = int(tok[1]), tuple(int(c) for c in tok[2:5])
                vals = [float(x) for x in tok[5:]]
                if tok[0] == "plane" and len(vals) == 7:
                    vals.append(vals[-1])
                if len(vals) != arity[tok[0]]:
                    raise SceneError(f"{tok[0]} expects {arity[tok[0]]} numbers")
                if label < 0 or any(not 0 <= c <= 255 for c in rgb):
                    raise SceneError("label must be >= 0 and colours in 0..255")
                prims.append(ScenePrimitive(tok[0], label, rgb, vals))
            elif tok[0] == "camera":
                w, h = int(tok[1]), int(tok[2])
                fx, fy = float(tok[3]), float(tok[4])
                cx, cy = (float(tok[5]), float(tok[6])) if len(tok) > 5 else ((w - 1) / 2, (h - 1) / 2)
                kw["intrinsics"] = Intrinsics(fx, fy, cx, cy, w, h)
                kw["intrinsics"].validate()
            elif tok[0] == "orbit":
                kw["orbit_radius"], kw["orbit_height"] = float(tok[1]), float(tok[2])
                if len(tok) > 3:
                    kw["target"] = np.array([float(x) for x in tok[3:6]])
            elif tok[0] == "labels":
                kw["n_labels"] = int(tok[1])
            else:
                raise SceneError(f"unknown directive {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            raise SceneError(f"line {lineno}: {exc}") from None
    if not prims:
        raise SceneError("scene has no primitives")
    scene = Scene(prims, **kw)
    if max(p.label for p in prims) >= scene.n_labels:
        raise SceneError("primitive label exceeds the label count")
    return scene


def load_scene(path) -> Scene:
    with open(path) as fh:
        return parse_scene(fh.read())


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose (x right, y down, z forward) looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:  # looking along ``up``: any perpendicular will do
        x = np.cross(f, (0.0, 1.0, 0.0) if abs(f[1]) < 0.9 else (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    pose = np.eye(4)
    pose[:3, :3] = np.column_stack([x, y, f])
    pose[:3, 3] = eye
    return pose


def orbit_trajectory(scene: Scene, n_frames: int) -> list[np.ndarray]:
    """Inward-facing circle around the scene centroid, alternating above and below."""
    if n_frames < 1:
        raise SceneError("n_frames must be >= 1")
    c = scene.centroid()
    poses = []
    for k in range(n_frames):
        ang = 2 * np.pi * k / n_frames
        h = scene.orbit_height if k % 2 == 0 else -0.5 * scene.orbit_height
        eye = c + np.array([scene.orbit_radius * np.cos(ang), scene.orbit_radius * np.sin(ang), h])
        poses.append(look_at(eye, c))
    return poses


def camera_rays(intr: Intrinsics, pose: np.ndarray) -> np.ndarray:
    """World directions with unit camera-z, so the ray parameter equals depth."""
    rows, cols = np.mgrid[0:intr.height, 0:intr.width]
    cam = np.stack([(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones(rows.shape)], -1)
    return cam.reshape(-1, 3) @ pose[:3, :3].T


def render_frame(scene: Scene, pose: np.ndarray, intrinsics: Intrinsics | None = None,
                 noise: float = 0.0, confusion: float = 0.0, seed: int = 0, frame_id: int = 0) -> Frame:
    intr = intrinsics or scene.intrinsics
    h, w = intr.height, intr.width
    dirs = camera_rays(intr, pose)
    origin = pose[:3, 3]
    t = np.stack([p.intersect(origin, dirs) for p in scene.primitives])
    nearest = np.argmin(t, axis=0)
    depth = t[nearest, np.arange(len(dirs))]
    hit = np.isfinite(depth)
    rng = np.random.default_rng([seed, frame_id])
    if noise > 0:
        depth = depth + rng.normal(0.0, noise, depth.shape)
        hit &= depth > 0
    depth = np.where(hit, depth, 0.0).reshape(h, w)
    labels_of = np.array([p.label for p in scene.primitives])
    colors_of = np.array([p.color for p in scene.primitives], dtype=np.uint8)
    color = np.where(hit[:, None], colors_of[nearest], 0).astype(np.uint8).reshape(h, w, 3)
    true = np.where(hit, labels_of[nearest], -1)
    labels = np.full((h * w, 2), -1, dtype=np.int32)
    probs = np.zeros((h * w, 2))
    labels[:, 0] = true
    probs[hit, 0] = 1.0
    if confusion > 0:
        wrong = hit & (rng.random(h * w) < confusion)
        other = rng.integers(0, scene.n_labels - 1, h * w)
        other = np.where(other >= true, other + 1, other)
        labels[wrong, 0], probs[wrong, 0] = other[wrong], 0.6
        labels[wrong, 1], probs[wrong, 1] = true[wrong], 0.3
    k = 2 if confusion > 0 else 1
    return Frame(depth, color, labels[:, :k].reshape(h, w, k), probs[:, :k].reshape(h, w, k),
                 pose, intr, frame_id)


def render_sequence(scene: Scene, poses, noise: float = 0.0, confusion: float = 0.0,
                    seed: int = 0) -> list[Frame]:
    workers = max(1, int(os.environ.get("MAPADAPT_THREADS", os.cpu_count() or 1)))
    jobs = [(scene, pose, None, noise, confusion, seed, i) for i, pose in enumerate(poses)]
    if workers == 1:
        return [render_frame(*j) for j in jobs]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda j: render_frame(*j), jobs))


@dataclass
class LabeledPoints:
    positions: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.positions)


def gt_surface_samples(scene: Scene, density: float, seed: int = 0) -> LabeledPoints:
    """Exact surface samples, round(area * density) per primitive."""
    if not density > 0:
        raise SceneError("density must be positive")
    rng = np.random.default_rng(seed)
    pts, labs = [], []
    for prim in scene.primitives:
        n = int(round(prim.area() * density))
        pts.append(prim.sample(n, rng))
        labs.append(np.full(n, prim.label, dtype=np.int64))
    return LabeledPoints(np.concatenate(pts), np.concatenate(labs))


def visible_mask(points: np.ndarray, frames, tol: float = 0.01) -> np.ndarray:
    """Points that project onto a pixel whose depth agrees within ``tol``."""
    seen = np.zeros(len(points), dtype=bool)
    for f in frames:
        k = f.intrinsics
        cam = (points - f.pose[:3, 3]) @ f.pose[:3, :3]
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = np.round(cam[:, 0] / z * k.fx + k.cx).astype(np.int64)
            row = np.round(cam[:, 1] / z * k.fy + k.cy).astype(np.int64)
        ok = (z > 0) & (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)
        d = np.zeros(len(points))
        d[ok] = f.depth[row[ok], col[ok]]
        seen |= ok & (d > 0) & (np.abs(d - z) <= tol)
    return seen
