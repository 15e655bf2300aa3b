"""Readers and writers for sequence files: depth, colour, poses, semantics, policies.

File layout of a sequence directory (all paths in the manifest are relative to it)::

    manifest.txt          key=value lines, plus ``frame=<id> <depth> <color> <semantics>``
    poses.txt             TUM trajectory: ``id tx ty tz qx qy qz qw``
    labels.txt            ``<id> <name>`` per line
    depth/*.png           16-bit grey, metres = value * depth_scale
    color/*.png           8-bit RGB
    semantics/*.semk      top-k observations, see :func:`save_semantics`
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .frame import MAX_OBSERVATIONS, Frame, Intrinsics
from .policy import LevelSizes, QualityLevel, QualityPolicy
from .semantics import CONFIDENCE_THRESHOLD


class InputError(ValueError):
    """Malformed or inconsistent input file."""


# ------------------------------------------------------------------ depth/color
def load_depth(path, scale: float = 1e-3) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16L", "I;16B", "I"):
            raise InputError(f"{path}: depth must be a 16-bit single channel PNG, got mode {im.mode}")
        raw = np.array(im)
    if raw.ndim != 2 or raw.max(initial=0) > 65535 or raw.min(initial=0) < 0:
        raise InputError(f"{path}: depth must be a 16-bit single channel PNG")
    return raw.astype(np.float64) * scale


def save_depth(path, depth: np.ndarray, scale: float = 1e-3):
    q = np.round(np.nan_to_num(depth, nan=0.0) / scale)
    q = np.where((q > 0) & (q <= 65535), q, 0).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def save_color(path, color: np.ndarray):
    Image.fromarray(np.asarray(color, dtype=np.uint8), "RGB").save(path)


# ------------------------------------------------------------------------ poses
def load_pose_file(path) -> list[tuple[int, np.ndarray]]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if len(tok) != 8:
                    raise ValueError(f"expected 8 fields, got {len(tok)}")
                fid = int(tok[0])
                t = np.array([float(x) for x in tok[1:4]])
                q = np.array([float(x) for x in tok[4:8]])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-3:
                raise InputError(f"{path}:{lineno}: quaternion norm {norm:.6f} is not unit")
            pose = np.eye(4)
            pose[:3, :3] = Rotation.from_quat(q / norm).as_matrix()
            pose[:3, 3] = t
            out.append((fid, pose))
    return out


def save_pose_file(path, poses):
    with open(path, "w") as fh:
        for fid, pose in poses:
            q = Rotation.from_matrix(pose[:3, :3]).as_quat()
            vals = list(pose[:3, 3]) + list(q)
            fh.write(f"{int(fid)} " + " ".join(f"{v:.17g}" for v in vals) + "\n")


# -------------------------------------------------------------------- semantics
SEM_MAGIC = b"SEMK"
SEM_VERSION = 1
_SEM_RECORD = np.dtype([("label", "<u2"), ("prob", "<f4")])


def save_semantics(path, labels: np.ndarray, probs: np.ndarray):
    """``SEMK`` u32 version, u32 W, u32 H, u8 k, then H*W*k (u16 label, f32 prob)."""
    h, w, k = labels.shape
    if k > MAX_OBSERVATIONS:
        raise InputError("at most four observations per pixel")
    rec = np.zeros((h, w, k), dtype=_SEM_RECORD)
    present = labels >= 0
    rec["label"] = np.where(present, labels, 0)
    rec["prob"] = np.where(present, probs, 0.0)
    with open(path, "wb") as fh:
        fh.write(SEM_MAGIC + struct.pack("<IIIB", SEM_VERSION, w, h, k))
        fh.write(rec.tobytes())


def load_semantics(path, width: int | None = None, height: int | None = None):
    """Returns (labels, probs) shaped (H, W, k); absent entries are -1 / 0."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SEM_MAGIC:
        raise InputError(f"{path}: bad magic")
    if len(data) < 17:
        raise InputError(f"{path}: truncated header")
    version, w, h, k = struct.unpack("<IIIB", data[4:17])
    if version != SEM_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    if k > MAX_OBSERVATIONS:
        raise InputError(f"{path}: k={k} exceeds four")
    if (width is not None and w != width) or (height is not None and h != height):
        raise InputError(f"{path}: dimensions {w}x{h} do not match the sequence")
    if len(data) != 17 + h * w * k * _SEM_RECORD.itemsize:
        raise InputError(f"{path}: payload size does not match header")
    rec = np.frombuffer(data, dtype=_SEM_RECORD, offset=17).reshape(h, w, k)
    probs = rec["prob"].astype(np.float64)
    if np.any(probs > 1.0) or np.any(~np.isfinite(probs)):
        raise InputError(f"{path}: probability above 1")
    keep = probs > CONFIDENCE_THRESHOLD
    labels = np.where(keep, rec["label"].astype(np.int32), -1)
    probs = np.where(keep, probs, 0.0)
    # absent entries may only trail the present ones
    order = np.argsort(-probs, axis=2, kind="stable")
    return np.take_along_axis(labels, order, 2), np.take_along_axis(probs, order, 2)


# ----------------------------------------------------------------------- policy
def parse_policy(text: str, source: str = "<policy>") -> QualityPolicy:
    levels: dict[int, QualityLevel] = {}
    kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
                if key in ("theta_middle", "theta_fine", "merge_confidence"):
                    kw[key] = float(val)
                elif key == "mode":
                    if val.upper() not in ("S", "SG"):
                        raise ValueError(f"mode must be S or SG, got {val!r}")
                    kw["use_geometry"] = val.upper() == "SG"
                elif key == "default":
                    kw["default_level"] = QualityLevel.parse(val)
                else:
                    raise ValueError(f"unknown key {key!r}")
            else:
                label_s, level_s = line.split(",")
                label = int(label_s)
                if label < 0:
                    raise ValueError("negative label id")
                if label in levels:
                    raise ValueError(f"duplicate label {label}")
                levels[label] = QualityLevel.parse(level_s)
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from None
    try:
        return QualityPolicy(levels, **kw)
    except ValueError as exc:
        raise InputError(f"{source}: {exc}") from None


def load_policy(path) -> QualityPolicy:
    with open(path) as fh:
        return parse_policy(fh.read(), str(path))


def save_policy(path, policy: QualityPolicy):
    with open(path, "w") as fh:
        fh.write(policy.canonical_text())


def load_label_table(path) -> dict[int, str]:
    table = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split(maxsplit=1)
            try:
                lid = int(tok[0])
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad label id") from None
            if lid in table:
                raise InputError(f"{path}:{lineno}: duplicate label id {lid}")
            table[lid] = tok[1] if len(tok) > 1 else str(lid)
    return table


# ----------------------------------------------------------------------- config
CONFIG_KEYS = {
    "truncation": float, "w_max": float, "max_ray_length": float, "min_depth": float, "alpha": float,
    "stride": int, "radius": float, "min_neighbors": int,
    "coarse": float, "middle": float, "fine": float, "block_size": int,
}


def load_config(path) -> dict:
    """key=value settings; unknown keys are an error."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise InputError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = CONFIG_KEYS[key](val)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value for {key}") from None
    return out


# --------------------------------------------------------------------- manifest
@dataclass
class FrameEntry:
    frame_id: int
    depth: str
    color: str
    semantics: str


@dataclass
class SequenceManifest:
    root: Path
    intrinsics: Intrinsics
    depth_scale: float = 1e-3
    n_labels: int = 40
    label_table: str = "labels.txt"
    poses: str = "poses.txt"
    frames: list[FrameEntry] = field(default_factory=list)

    def path(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(path, man: SequenceManifest):
    k = man.intrinsics
    lines = [f"width={k.width}", f"height={k.height}", f"fx={k.fx!r}", f"fy={k.fy!r}",
             f"cx={k.cx!r}", f"cy={k.cy!r}", f"depth_scale={man.depth_scale!r}",
             f"n_labels={man.n_labels}", f"label_table={man.label_table}", f"poses={man.poses}"]
    lines += [f"frame={f.frame_id} {f.depth} {f.color} {f.semantics}" for f in man.frames]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> SequenceManifest:
    """Parse a manifest and check every referenced file before returning."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest {path} not found")
    vals, frames = {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "frame":
            tok = val.split()
            if len(tok) != 4:
                raise InputError(f"{path}:{lineno}: frame needs <id> <depth> <color> <semantics>")
            try:
                frames.append(FrameEntry(int(tok[0]), *tok[1:]))
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad frame id") from None
        else:
            vals[key] = val
    need = ("width", "height", "fx", "fy", "cx", "cy")
    missing = [k for k in need if k not in vals]
    if missing:
        raise InputError(f"{path}: missing keys {missing}")
    try:
        intr = Intrinsics(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                          int(vals["width"]), int(vals["height"]))
        man = SequenceManifest(path.parent, intr, float(vals.get("depth_scale", 1e-3)),
                               int(vals.get("n_labels", 40)), vals.get("label_table", "labels.txt"),
                               vals.get("poses", "poses.txt"), frames)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    try:
        intr.validate()
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not frames:
        raise InputError(f"{path}: no frames listed")
    refs = [man.poses, man.label_table] + [p for f in frames for p in (f.depth, f.color, f.semantics)]
    for rel in refs:
        if not man.path(rel).is_file():
            raise InputError(f"{path}: referenced file {rel} does not exist")
    pose_ids = {fid for fid, _ in load_pose_file(man.path(man.poses))}
    absent = [f.frame_id for f in frames if f.frame_id not in pose_ids]
    if absent:
        raise InputError(f"{path}: no pose for frames {absent[:5]}")
    return man


def iter_frames(man: SequenceManifest):
    poses = dict(load_pose_file(man.path(man.poses)))
    k = man.intrinsics
    for entry in man.frames:
        depth = load_depth(man.path(entry.depth), man.depth_scale)
        color = load_color(man.path(entry.color))
        labels, probs = load_semantics(man.path(entry.semantics), k.width, k.height)
        if depth.shape != (k.height, k.width) or color.shape[:2] != depth.shape:
            raise InputError(f"frame {entry.frame_id}: image size differs from the manifest")
        frame = Frame(depth, color, labels, probs, poses[entry.frame_id], k, entry.frame_id)
        try:
            frame.validate()
        except ValueError as exc:
            raise InputError(f"frame {entry.frame_id}: {exc}") from None
        yield frame


def write_sequence(root, frames, n_labels: int, depth_scale: float = 1e-4,
                   label_names: dict[int, str] | None = None) -> SequenceManifest:
    root = Path(root)
    for sub in ("depth", "color", "semantics"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        name = f"{f.frame_id:06d}"
        entry = FrameEntry(f.frame_id, f"depth/{name}.png", f"color/{name}.png", f"semantics/{name}.semk")
        save_depth(root / entry.depth, f.depth, depth_scale)
        save_color(root / entry.color, f.color)
        save_semantics(root / entry.semantics, f.labels, f.probs)
        entries.append(entry)
    save_pose_file(root / "poses.txt", [(f.frame_id, f.pose) for f in frames])
    names = label_names or {}
    with open(root / "labels.txt", "w") as fh:
        for lid in range(n_labels):
            fh.write(f"{lid} {names.get(lid, f'class{lid}')}\n")
    man = SequenceManifest(root, frames[0].intrinsics, depth_scale, n_labels, frames=entries)
    save_manifest(root / "manifest.txt", man)
    return man


def level_sizes_from(config: dict) -> LevelSizes:
    d = LevelSizes()
    try:
        return LevelSizes(config.get("coarse", d.coarse), config.get("middle", d.middle),
                          config.get("fine", d.fine))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def env_threads(default: int | None = None) -> int:
    return max(1, int(os.environ.get("MAPADAPT_THREADS", default or os.cpu_count() or 1)))
