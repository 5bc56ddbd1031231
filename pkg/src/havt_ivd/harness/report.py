"""Figures for training logs and ablation tables.

Each figure is written as a PNG next to the CSV it was drawn from:
``log.csv`` gives ``loss_curves.png`` and ``ablation_<axis>.csv`` gives
``ablation_<axis>.png``.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ablation import read_table  # noqa: E402


def _read_log(path: Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list[float]] = {k: [] for k in (rows[0].keys() if rows else [])}
    for row in rows:
        for k, v in row.items():
            cols[k].append(float(v))
    return cols


def plot_training_log(log_csv: str | os.PathLike) -> Path:
    log_csv = Path(log_csv)
    cols = _read_log(log_csv)
    fig, (ax_loss, ax_map) = plt.subplots(1, 2, figsize=(9, 3.4))
    epochs = cols.get("epoch", [])
    for key, label in (("loss_conf", "objectness"), ("loss_cls", "class"), ("loss_bbox", "box (1 - CIoU)")):
        ax_loss.plot(epochs, cols.get(key, []), label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=8)
    pts = [(e, 100 * v) for e, v in zip(epochs, cols.get("val_map", [])) if not math.isnan(v)]
    if pts:
        ax_map.plot(*zip(*pts), marker="o", ms=3)
    ax_map.set_xlabel("epoch")
    ax_map.set_ylabel("val mAP@0.5 (x100)")
    ax_map.set_ylim(0, 100)
    fig.suptitle(log_csv.parent.name, fontsize=9)
    fig.tight_layout()
    out = log_csv.with_name("loss_curves.png")
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_ablation_table(table_csv: str | os.PathLike) -> Path:
    table_csv = Path(table_csv)
    rows = read_table(table_csv)
    metrics = [("map_50", "mAP"), ("ap_moving", "AP(M)"), ("ap_idling", "AP(I)"), ("ap_engine_off", "AP(Eoff)")]
    fig, ax = plt.subplots(figsize=(1.6 + 1.5 * len(rows), 3.4))
    width = 0.8 / len(metrics)
    for k, (key, label) in enumerate(metrics):
        xs = [i + (k - (len(metrics) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [float(r[key]) for r in rows], width, label=label)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["value"] for r in rows])
    axis = rows[0]["axis"] if rows else table_csv.stem
    ax.set_xlabel(axis)
    ax.set_ylabel("x100 (seed median)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    out = table_csv.with_suffix(".png")
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def render_report(root: str | os.PathLike) -> list[Path]:
    """Render every training log and ablation table found under ``root``."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"no such directory {root}")
    figures = [plot_training_log(p) for p in sorted(root.rglob("log.csv"))]
    figures += [plot_ablation_table(p) for p in sorted(root.rglob("ablation_*.csv")) if not p.stem.endswith("_runs")]
    return figures
