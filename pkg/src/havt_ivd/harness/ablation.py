"""Ablation runner: one model per axis value and seed on shared data splits.

Each run lives in ``<out>/runs/<config digest>/`` with the usual training
artifacts plus ``test_report.txt``, ``test_metrics.txt`` (unrounded) and
``test_detections.txt``. Finished runs are reused: an interrupted ablation
resumes where it stopped, and a configuration shared by several axes (the
base model appears in every axis) is trained once.
"""

from __future__ import annotations

import csv
import logging
import os
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from ..errors import ConfigError
from ..data_model import CLASS_NAMES
from .config import RunConfig
from .data import SplitDataset
from .training import EpochRecord, evaluate_model, load_checkpoint, train

log = logging.getLogger(__name__)

AXES: dict[str, tuple[str, list]] = {
    "scales": ("scales_enabled", [(32,), (16, 32), (8, 16, 32)]),
    "scaq": ("n_scaq", [49, 196, 784]),
    "head": ("head", ["coupled", "decoupled"]),
    "mics": ("mics", [1, 3, 6]),
    "fusion": ("fusion", ["none", "concat", "havt"]),
}

METRICS = tuple(f"ap_{c}" for c in CLASS_NAMES) + ("map_50", "map_75", "map_avg")


def value_label(value) -> str:
    if isinstance(value, (tuple, list)):
        return "-".join(str(v) for v in value)
    return str(value)


@dataclass
class AblationRow:
    label: str
    per_seed: dict[int, dict[str, float]]

    def median(self, metric: str) -> float:
        return statistics.median(r[metric] for r in self.per_seed.values())


@dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow]
    split_hashes: dict[str, str] = field(default_factory=dict)

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def median_lines(self) -> list[str]:
        """CSV lines of per-value seed medians, metrics x100."""
        lines = [",".join(("axis", "value", "n_seeds") + METRICS)]
        for r in self.rows:
            vals = ",".join(f"{100 * r.median(m):.2f}" for m in METRICS)
            lines.append(f"{self.axis},{r.label},{len(r.per_seed)},{vals}")
        return lines

    def run_lines(self) -> list[str]:
        lines = [",".join(("axis", "value", "seed") + METRICS)]
        for r in self.rows:
            for seed, metrics in sorted(r.per_seed.items()):
                lines.append(f"{self.axis},{r.label},{seed}," + ",".join(f"{100 * metrics[m]:.2f}" for m in METRICS))
        return lines

    def to_text(self) -> str:
        """Fixed-width table: mAP@0.5 then per-class AP, seed medians x100."""
        head = f"{self.axis:<12}{'mAP':>8}{'AP(M)':>8}{'AP(I)':>8}{'AP(Eoff)':>10}"
        out = [head, "-" * len(head)]
        for r in self.rows:
            out.append(
                f"{r.label:<12}{100 * r.median('map_50'):>8.2f}{100 * r.median('ap_moving'):>8.2f}"
                f"{100 * r.median('ap_idling'):>8.2f}{100 * r.median('ap_engine_off'):>10.2f}"
            )
        return "\n".join(out) + "\n"

    def write(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "table": out / f"ablation_{self.axis}.csv",
            "runs": out / f"ablation_{self.axis}_runs.csv",
            "text": out / f"ablation_{self.axis}.txt",
        }
        paths["table"].write_text("\n".join(self.median_lines()) + "\n")
        paths["runs"].write_text("\n".join(self.run_lines()) + "\n")
        paths["text"].write_text(self.to_text())
        return paths


def read_table(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_metrics(path: Path) -> dict[str, float]:
    out = {}
    for line in path.read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep and key in METRICS:
            out[key] = float(value)
    return out


class _DataCache:
    """Split datasets shared across runs, keyed by (split, mic count, flips)."""

    def __init__(self, root: Path):
        self.root = root
        self._sets: dict[tuple[str, int, bool], SplitDataset] = {}

    def get(self, split: str, mics: int, flips: bool = False) -> SplitDataset:
        key = (split, mics, flips)
        if key not in self._sets:
            # keep at most one mic configuration in memory
            self._sets = {k: v for k, v in self._sets.items() if k[1] == mics}
            self._sets[key] = SplitDataset(self.root / split, mics, flips=flips)
        return self._sets[key]


def run_single(
    run: RunConfig,
    data: _DataCache,
    run_dir: Path,
    eval_split: str = "test",
    progress: Callable[[EpochRecord], None] | None = None,
) -> tuple[dict[str, float], dict[str, str]]:
    """Train (or reuse) one configuration and score its best checkpoint."""
    metrics_path = run_dir / "test_metrics.txt"
    digest_path = run_dir / "digest.txt"
    if metrics_path.exists() and digest_path.exists() and digest_path.read_text().strip() == run.digest():
        log.info("reusing %s", run_dir)
        hashes = dict(line.split("=", 1) for line in (run_dir / "hashes.txt").read_text().splitlines() if line)
        return _read_metrics(metrics_path), hashes
    train_data, val_data = data.get("train", run.mics, run.augment_flips), data.get("val", run.mics)
    result = train(run, data.root, run_dir, datasets=(train_data, val_data), progress=progress)
    test_data = data.get(eval_split, run.mics)
    model, _, _ = load_checkpoint(result.checkpoint)
    report = evaluate_model(model, test_data, run, det_path=run_dir / "test_detections.txt")
    hashes = dict(result.split_hashes)
    hashes[eval_split] = test_data.split_hash()
    (run_dir / "hashes.txt").write_text("".join(f"{k}={v}\n" for k, v in hashes.items()))
    report.write(run_dir / "test_report.txt")
    exact = {f"ap_{k}": v for k, v in report.ap_per_class.items()}
    exact.update(map_50=report.map_50, map_75=report.map_75, map_avg=report.map_avg)
    metrics_path.write_text("".join(f"{k}={v!r}\n" for k, v in exact.items()))
    digest_path.write_text(run.digest() + "\n")
    return _read_metrics(metrics_path), hashes


def run_ablation(
    axis: str,
    base: RunConfig,
    dataset_root: str | os.PathLike,
    out_dir: str | os.PathLike,
    seeds: Sequence[int] = (0,),
    values: Sequence | None = None,
    eval_split: str = "test",
    progress: Callable[[str, EpochRecord], None] | None = None,
) -> AblationTable:
    """Train one model per (axis value, seed) and tabulate test-split metrics.

    Every run shares the base configuration except the ablated field and the
    seed; all runs read the same split directories, and the split hashes are
    checked to agree.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    field_name, default_values = AXES[axis]
    values = list(default_values if values is None else values)
    data = _DataCache(Path(dataset_root))
    runs_dir = Path(out_dir) / "runs"
    rows = []
    split_hashes: dict[str, str] = {}
    for value in values:
        label = value_label(value)
        per_seed = {}
        for seed in seeds:
            run = replace(base, **{field_name: value, "seed": seed})
            run.validate()
            tag = f"{axis}={label} seed={seed}"
            cb = (lambda rec, tag=tag: progress(tag, rec)) if progress else None
            metrics, hashes = run_single(run, data, runs_dir / run.digest(), eval_split, cb)
            for name, h in hashes.items():
                if split_hashes.setdefault(name, h) != h:
                    raise RuntimeError(f"split {name} differs between ablation runs ({h} vs {split_hashes[name]})")
            per_seed[seed] = metrics
        rows.append(AblationRow(label, per_seed))
    table = AblationTable(axis, rows, split_hashes)
    table.write(Path(out_dir))
    return table
