"""Command line entry point: synth, reconstruct, mesh, eval and info."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset_io as dio
from .curvature import ComplexityConfig
from .integrator import IntegratorConfig
from .mesher import extract_mesh
from .metrics import evaluate
from .pipeline import build_integrator
from .ply import read_mesh_ply, read_points_ply, write_mesh_ply, write_points_ply
from .policy import QualityLevel, QualityPolicy, SplitCause
from .scene_synth import SceneError, gt_surface_samples, load_scene, orbit_trajectory, render_sequence, visible_mask
from .report import write_frame_log
from .serialization import FormatError, load_map, save_map

log = logging.getLogger("adaptmap")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


class UsageError(ValueError):
    pass


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} not found")
    return p


# --------------------------------------------------------------------- synth
def cmd_synth(args) -> int:
    scene = load_scene(_require_file(args.scene, "scene file"))
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.noise < 0 or not 0 <= args.confusion <= 1:
        raise UsageError("--noise must be >= 0 and --confusion within [0, 1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = render_sequence(scene, orbit_trajectory(scene, args.frames), args.noise, args.confusion, args.seed)
    dio.write_sequence(out, frames, scene.n_labels)
    gt = gt_surface_samples(scene, args.gt_density, args.seed)
    seen = visible_mask(gt.positions, frames)
    write_points_ply(out / "gt.ply", gt.positions[seen], gt.labels[seen])
    shutil.copyfile(args.scene, out / "scene.txt")
    log.info("wrote %d frames and %d GT points to %s", len(frames), int(seen.sum()), out)
    return EXIT_OK


# --------------------------------------------------------------- reconstruct
def _setup(args, n_labels: int = 40):
    config = dio.load_config(_require_file(args.config, "config file")) if args.config else {}
    policy = dio.load_policy(_require_file(args.policy, "policy file")) if args.policy else QualityPolicy()
    if args.mode:
        policy = dataclasses.replace(policy, use_geometry=args.mode == "SG")
    icfg = IntegratorConfig(**{k: config[k] for k in ("truncation", "w_max", "max_ray_length", "min_depth", "alpha")
                               if k in config})
    icfg.neighbor_split = not args.no_neighbor_split
    icfg.single_grid = args.single_grid
    ccfg = ComplexityConfig(**{k: config[k] for k in ("stride", "radius", "min_neighbors") if k in config})
    sizes = dio.level_sizes_from(config)
    if args.fixed_size is not None and not args.fixed_size > 0:
        raise UsageError("--fixed-size must be positive")
    try:
        integ = build_integrator(policy, sizes, n_labels, config=icfg, complexity=ccfg, fixed_size=args.fixed_size,
                                 block_size=config.get("block_size", 8))
        icfg.tau(integ.map)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return integ


def cmd_reconstruct(args) -> int:
    man = dio.load_manifest(args.manifest)
    integ = _setup(args, man.n_labels)
    try:
        stats = [integ.integrate_frame(f) for f in dio.iter_frames(man)]
    except dio.InputError:
        raise
    except ValueError as exc:  # frame content the map cannot take, e.g. label ids out of range
        raise UsageError(str(exc)) from None
    save_map(args.out, integ.map)
    write_frame_log(f"{args.out}.frames.csv", stats)
    times = np.array([s.time_ms for s in stats])
    log.info("integrated %d frames (%.1f +- %.1f ms/frame), %d blocks", len(stats), times.mean(), times.std(),
             integ.map.n_blocks)
    return EXIT_OK


# ---------------------------------------------------------------------- mesh
def cmd_mesh(args) -> int:
    vmap = load_map(_require_file(args.map, "map file"))
    t0 = time.perf_counter()
    mesh = extract_mesh(vmap)
    ms = 1e3 * (time.perf_counter() - t0)
    write_mesh_ply(args.out, mesh, binary=not args.ascii)
    meta = {"mesh_time_ms": ms, "vertices": int(len(mesh.vertices)), "triangles": int(len(mesh.triangles))}
    Path(f"{args.out}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    log.info("%d vertices, %d triangles in %.0f ms", meta["vertices"], meta["triangles"], ms)
    return EXIT_OK


# ---------------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    from . import report as rp
    from .scene_synth import LabeledPoints

    vmap = load_map(_require_file(args.map, "map file"))
    mesh = read_mesh_ply(_require_file(args.mesh, "mesh file"))
    gt_pts, gt_lab = read_points_ply(_require_file(args.gt, "GT point file"))
    policy = dio.load_policy(_require_file(args.policy, "policy file")) if args.policy else QualityPolicy()
    if not args.density > 0:
        raise UsageError("--density must be positive")
    frames_csv = Path(args.frames_log) if args.frames_log else Path(f"{args.map}.frames.csv")
    frame_log = rp.read_frame_log(frames_csv) if frames_csv.is_file() else None
    meta_path = Path(f"{args.mesh}.meta.json")
    mesh_ms = json.loads(meta_path.read_text()).get("mesh_time_ms", float("nan")) if meta_path.is_file() else float("nan")
    report = evaluate(vmap, mesh, LabeledPoints(gt_pts, gt_lab), policy,
                      frame_log["time_ms"] if frame_log is not None else None, mesh_ms, args.density, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volume = {QualityLevel(k).name.lower(): v for k, v in vmap.level_volume_fractions().items()}
    rp.write_report_csv(out / "report.csv", report)
    rp.write_report_json(out / "report.json", report, {"volume_percent": volume})
    rp.plot_level_metrics(report, out / "level_metrics.png")
    rp.plot_volume_shares(volume, out / "volume_shares.png")
    if frame_log is not None:
        rp.plot_frame_times(frame_log, out / "frame_times.png")
    log.info("report written to %s", out)
    return EXIT_OK


# ---------------------------------------------------------------------- info
def map_summary(vmap) -> dict:
    active = vmap.active_cells()
    lvl = vmap.child_level[active]
    cause = vmap.cause[active]
    return {
        "blocks": int(vmap.n_blocks),
        "cells": int(len(active)),
        "cells_per_level": {QualityLevel(l).name.lower(): int(np.count_nonzero(lvl == l)) for l in (0, 1, 2)},
        "split_causes": {c.name.lower(): int(np.count_nonzero((cause == c) & (lvl > 0)))
                         for c in SplitCause if c != SplitCause.NONE},
        "memory_bytes": int(vmap.memory_bytes()),
        "volume_percent": {QualityLevel(k).name.lower(): v for k, v in vmap.level_volume_fractions().items()},
        "voxel_sizes": [vmap.sizes.coarse, vmap.sizes.middle, vmap.sizes.fine],
    }


def cmd_info(args) -> int:
    s = map_summary(load_map(_require_file(args.map, "map file")))
    if args.json:
        Path(args.json).write_text(json.dumps(s, indent=2) + "\n")
    print(f"blocks            {s['blocks']}")
    print(f"coarse cells      {s['cells']}")
    for name, n in s["cells_per_level"].items():
        print(f"  {name:<8} cells {n:>8d}   volume {s['volume_percent'][name]:6.2f} %")
    print("split causes      " + ", ".join(f"{k}={v}" for k, v in s["split_causes"].items()))
    print(f"memory            {s['memory_bytes']} bytes ({s['memory_bytes'] / 2**20:.2f} MiB)")
    return EXIT_OK


# ---------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapadapt", description="Semantic quality-adaptive TSDF mapping.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic RGB-D sequence from a scene file")
    s.add_argument("scene")
    s.add_argument("out")
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="depth noise sigma in meters")
    s.add_argument("--confusion", type=float, default=0.0, help="probability of a wrong top label")
    s.add_argument("--gt-density", type=float, default=2e4, help="GT samples per square meter")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="integrate a sequence into a map")
    r.add_argument("manifest")
    r.add_argument("out")
    r.add_argument("--policy")
    r.add_argument("--config")
    r.add_argument("--fixed-size", type=float)
    r.add_argument("--mode", choices=("S", "SG"))
    r.add_argument("--no-neighbor-split", action="store_true")
    r.add_argument("--single-grid", action="store_true", help="ablation: one coarse subsampling grid")
    r.set_defaults(func=cmd_reconstruct)

    m = sub.add_parser("mesh", help="extract a PLY mesh from a map")
    m.add_argument("map")
    m.add_argument("out")
    g = m.add_mutually_exclusive_group()
    g.add_argument("--ascii", action="store_true")
    g.add_argument("--binary", action="store_true")
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", help="evaluate a map and mesh against GT points")
    e.add_argument("map")
    e.add_argument("mesh")
    e.add_argument("gt")
    e.add_argument("--policy")
    e.add_argument("--out", default="eval")
    e.add_argument("--frames-log")
    e.add_argument("--density", type=float, default=1e5, help="mesh samples per square meter")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="summarise a map")
    i.add_argument("map")
    i.add_argument("--json")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, dio.InputError, SceneError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
