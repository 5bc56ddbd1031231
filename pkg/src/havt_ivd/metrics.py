"""Average precision and mAP for center-format boxes.

Matching is greedy in descending score order; each detection takes the
unmatched ground truth of its class with the highest IoU, provided that IoU
reaches the threshold. Precision-recall curves are integrated with
all-points interpolation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import CLASS_NAMES, GroundTruthBox, list_samples, read_boxes

IOU_GRID = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class ScoredBox:
    cx: float
    cy: float
    w: float
    h: float
    cls: int
    score: float

    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass
class APResult:
    ap: float
    vacuous: bool = False   # no ground truth of this class


def all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    dets: Sequence[Sequence],
    gts: Sequence[Sequence],
    cls: int,
    iou_t: float = 0.5,
) -> APResult:
    """AP of one class over a set of images.

    ``dets[k]`` and ``gts[k]`` belong to image k; detections need ``box()``,
    ``cls`` and ``score``, ground truths ``box()`` or ``cx..h`` and ``cls``.
    A class with no ground truth scores 1 when it also has no detections and
    0 otherwise; both cases are flagged as vacuous.
    """
    gt_boxes = [[_as_box(g) for g in img if int(g.cls) == cls] for img in gts]
    n_gt = sum(len(g) for g in gt_boxes)
    order = []
    for img, img_dets in enumerate(dets):
        for k, d in enumerate(img_dets):
            if int(d.cls) == cls:
                order.append((-float(d.score), img, k, d.box()))
    order.sort(key=lambda x: x[:3])
    if n_gt == 0:
        return APResult(1.0 if not order else 0.0, vacuous=True)
    if not order:
        return APResult(0.0)

    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(order))
    for r, (_, img, _, box) in enumerate(order):
        best, best_iou = -1, -1.0
        for g, gbox in enumerate(gt_boxes[img]):
            v = iou(box, gbox)
            # strict '>' keeps the lowest-index gt among equal IoUs
            if not matched[img][g] and v >= iou_t and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            matched[img][best] = True
            tp[r] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return APResult(all_points_ap(recall, precision))


def _as_box(g) -> tuple[float, float, float, float]:
    return g.box() if hasattr(g, "box") else (g.cx, g.cy, g.w, g.h)


@dataclass
class EvalReport:
    ap_per_class: dict[str, float]
    map_50: float
    map_75: float
    map_avg: float
    vacuous: list[str] = field(default_factory=list)
    ap_per_threshold: dict[float, dict[str, float]] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"ap_{name}={100 * v:.2f}" for name, v in self.ap_per_class.items()]
        out += [f"map_50={100 * self.map_50:.2f}", f"map_75={100 * self.map_75:.2f}", f"map_avg={100 * self.map_avg:.2f}"]
        out += [f"vacuous_{name}=1" for name in self.vacuous]
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text())


def evaluate_lists(
    dets: Sequence[Sequence],
    gts: Sequence[Sequence],
    thresholds: Iterable[float] = IOU_GRID,
) -> EvalReport:
    """Per-class AP at IoU 0.5 and mAP at 0.5, 0.75 and averaged over ``thresholds``."""
    thresholds = sorted(set(float(t) for t in thresholds) | {0.5, 0.75})
    per_t: dict[float, dict[str, float]] = {}
    vacuous = []
    for t in thresholds:
        res = {name: average_precision(dets, gts, c, t) for c, name in enumerate(CLASS_NAMES)}
        per_t[t] = {name: r.ap for name, r in res.items()}
        if t == 0.5:
            vacuous = [name for name, r in res.items() if r.vacuous]
    maps = {t: float(np.mean(list(v.values()))) for t, v in per_t.items()}
    grid = [t for t in thresholds if any(abs(t - g) < 1e-9 for g in IOU_GRID)] or thresholds
    return EvalReport(
        ap_per_class=dict(per_t[0.5]),
        map_50=maps[0.5],
        map_75=maps[0.75],
        map_avg=float(np.mean([maps[t] for t in grid])),
        vacuous=vacuous,
        ap_per_threshold=per_t,
    )


# -- detection dump files ---------------------------------------------------------

def format_detection_line(sample_id: str, det) -> str:
    return f"{sample_id} {int(det.cls)} {det.score!r} {det.cx!r} {det.cy!r} {det.w!r} {det.h!r}"


def write_detections(path: str | os.PathLike, dets_by_sample: Mapping[str, Sequence]) -> None:
    lines = [format_detection_line(sid, d) for sid, dets in dets_by_sample.items() for d in dets]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path: str | os.PathLike) -> dict[str, list[ScoredBox]]:
    out: dict[str, list[ScoredBox]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        sid, cls, score, cx, cy, w, h = line.split()
        out.setdefault(sid, []).append(ScoredBox(float(cx), float(cy), float(w), float(h), int(cls), float(score)))
    return out


def load_ground_truth(split_root: str | os.PathLike) -> dict[str, list[GroundTruthBox]]:
    return {p.name: read_boxes(p / "boxes.txt") for p in list_samples(split_root)}


def evaluate(det_file: str | os.PathLike, gt_dataset: str | os.PathLike, thresholds: Iterable[float] = IOU_GRID) -> EvalReport:
    """Score a detection dump against the boxes of one dataset split directory."""
    gts = load_ground_truth(gt_dataset)
    dets = read_detections(det_file)
    unknown = set(dets) - set(gts)
    if unknown:
        raise ValueError(f"detections reference unknown sample ids: {sorted(unknown)[:5]}")
    ids = sorted(gts)
    return evaluate_lists([dets.get(i, []) for i in ids], [gts[i] for i in ids], thresholds)

