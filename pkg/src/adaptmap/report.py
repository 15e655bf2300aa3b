"""Delimited, JSON and figure outputs for evaluation and frame logs."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .integrator import FrameStats  # noqa: E402
from .metrics import EvalReport, LevelReport  # noqa: E402

FRAME_FIELDS = ("frame_id", "points", "rays_coarse", "rays_middle", "rays_fine", "voxels_updated",
                "split", "merged", "time_ms")
LEVEL_ORDER = ("fine", "middle", "coarse")
LEVEL_COLORS = {"fine": "#1b7837", "middle": "#c2a5cf", "coarse": "#762a83"}


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    return v


# ------------------------------------------------------------------- frames
def frame_rows(stats: list[FrameStats]) -> list[dict]:
    return [{"frame_id": s.frame_id, "points": s.points, "rays_coarse": s.rays[0], "rays_middle": s.rays[1],
             "rays_fine": s.rays[2], "voxels_updated": s.voxels_updated, "split": s.split,
             "merged": s.merged, "time_ms": s.time_ms} for s in stats]


def write_frame_log(path, stats: list[FrameStats]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, FRAME_FIELDS)
        w.writeheader()
        for row in frame_rows(stats):
            w.writerow({k: (f"{v:.3f}" if k == "time_ms" else v) for k, v in row.items()})


def read_frame_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(FRAME_FIELDS) - set(rows[0] if rows else FRAME_FIELDS)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return {k: np.array([float(r[k]) for r in rows]) for k in FRAME_FIELDS}


# ------------------------------------------------------------------- report
def write_report_csv(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "metric", "value"])
        for scope, key, val in report.rows():
            w.writerow([scope, key, repr(float(val)) if isinstance(val, float) else val])


def write_report_json(path, report: EvalReport, extra: dict | None = None):
    doc = _json_value(report.to_dict())
    if extra:
        doc.update(_json_value(extra))
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_report_json(path) -> EvalReport:
    doc = json.loads(Path(path).read_text())

    def num(v):
        if v is None:
            return math.nan
        return float(v) if isinstance(v, str) else v

    levels = {k: LevelReport(**{f: num(x) for f, x in v.items()}) for k, v in doc["levels"].items()}
    for rep in levels.values():
        rep.n_gt, rep.n_recon = int(rep.n_gt), int(rep.n_recon)
    fields = {k: num(v) for k, v in doc.items() if k in EvalReport.__dataclass_fields__ and k != "levels"}
    fields["map_size_bytes"] = int(fields.get("map_size_bytes", 0))
    return EvalReport(levels=levels, **fields)


# ------------------------------------------------------------------ figures
def _finite(x):
    return x if math.isfinite(x) else np.nan


def plot_level_metrics(report: EvalReport, path):
    """Completion error, completion ratio and geometric error per quality level."""
    names = [n for n in LEVEL_ORDER if n in report.levels]
    panels = (("completion_error_mean", "completion_error_std", "completion error (cm)"),
              ("completion_ratio_5cm", None, "completion ratio < 5 cm (%)"),
              ("geometric_error_mean", "geometric_error_std", "geometric error (cm)"))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    x = np.arange(len(names))
    for ax, (key, err, title) in zip(axes, panels):
        vals = [_finite(getattr(report.levels[n], key)) for n in names]
        errs = [_finite(getattr(report.levels[n], err)) for n in names] if err else None
        ax.bar(x, vals, yerr=errs, color=[LEVEL_COLORS[n] for n in names], capsize=3)
        ax.set_xticks(x, names)
        ax.set_title(title, fontsize=9)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_frame_times(log: dict[str, np.ndarray], path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(log["frame_id"], log["time_ms"], "o-", ms=3, color="k")
    ax1.axhline(log["time_ms"].mean(), ls="--", lw=0.8, color="grey")
    ax1.set_xlabel("frame")
    ax1.set_ylabel("integration time (ms)")
    bottom = np.zeros(len(log["frame_id"]))
    for name in ("coarse", "middle", "fine"):
        vals = log[f"rays_{name}"]
        ax2.bar(log["frame_id"], vals, bottom=bottom, color=LEVEL_COLORS[name], label=name)
        bottom += vals
    ax2.set_xlabel("frame")
    ax2.set_ylabel("rays cast")
    ax2.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_volume_shares(fractions: dict, path):
    names = [str(k.name).lower() if hasattr(k, "name") else str(k) for k in fractions]
    vals = list(fractions.values())
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(names, vals, color=[LEVEL_COLORS.get(n, "grey") for n in names])
    ax.set_ylabel("volume share (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
