"""Static PNG figures. Metadata is stripped so reruns give identical bytes."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}
LOSS_COLUMNS = ("l_det", "l_inst", "l_img", "l_dist", "l_total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _bars(values: dict, path, ylabel, title=""):
    names = sorted(values)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(names, [values[n] for n in names], color="#4a7bb7")
    ax.set_ylabel(ylabel)
    ax.axhline(0.0, color="black", linewidth=0.6)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def per_target_bars(map_by_target: dict, path, title=""):
    return _bars(map_by_target, path, "mAP@0.5 (points)", title)


def delta_bars(delta_by_target: dict, path):
    return _bars(delta_by_target, path, "DA mAP - DG mAP (points)", "delta-stability")


def loss_curves(log_path, path, smooth: int = 25):
    """One line per loss column of a training log, moving-averaged over ``smooth`` steps."""
    with open(log_path) as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for col in LOSS_COLUMNS:
        vals = [float(r[col]) for r in rows]
        if not any(vals):
            continue
        k = max(1, min(smooth, len(vals)))
        avg = [sum(vals[max(0, i - k + 1): i + 1]) / (i + 1 - max(0, i - k + 1)) for i in range(len(vals))]
        ax.plot(steps, avg, label=col, linewidth=1.0)
    joint = [s for s, r in zip(steps, rows) if r["stage"] == "joint"]
    if joint:
        ax.axvline(joint[0], color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(results, path):
    """Mean target mAP per grid cell, in grid order."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [n for n, _ in results]
    ax.bar(range(len(names)), [100 * r.map for _, r in results], color="#4a7bb7")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mean target mAP@0.5 (points)")
    fig.tight_layout()
    return _save(fig, path)
