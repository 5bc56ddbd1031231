"""Pyramid fusion, anchor-free heads, target assignment, loss and NMS.

Head output channel layout per cell: 3 class logits, 1 objectness logit,
then box parameters (tx, ty, tw, th). Cell (i, j) is column i, row j.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_model import NUM_CLASSES, GroundTruthBox, VehicleState
from .encoders import STRIDES, level_size
from .errors import ShapeError
from .fusion import resample_map

N_OUT = NUM_CLASSES + 1 + 4
OBJ = NUM_CLASSES
BOX = slice(NUM_CLASSES + 1, N_OUT)
BASE_SCALE = 4.0
SIZE_BANDS = (64.0, 128.0)
LOSS_WEIGHTS = {"conf": 1.0, "cls": 1.0, "bbox": 5.0}
_TW_CLAMP = 10.0


# -- fusion and heads -----------------------------------------------------------

class PyramidFuse(nn.Module):
    """Resample the evidence map to a level, concatenate with the visual map,
    reduce 2E -> E with a 1x1 convolution."""

    def __init__(self, embed_dim: int, extra_channels: int | None = None):
        super().__init__()
        extra = embed_dim if extra_channels is None else extra_channels
        self.reduce = nn.Conv2d(embed_dim + extra, embed_dim, 1)

    def forward(self, avce: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        if avce.shape[0] != visual.shape[0]:
            raise ShapeError(f"batch mismatch {avce.shape[0]} vs {visual.shape[0]}")
        side = visual.shape[-1]
        if visual.shape[-2] != side:
            raise ShapeError(f"visual map must be square, got {tuple(visual.shape)}")
        return self.reduce(torch.cat([visual, resample_map(avce, side)], dim=1))


def pyramid_fuse(fusers: dict, avce: torch.Tensor, levels: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
    return {s: fusers[str(s)](avce, v) for s, v in levels.items()}


def _conv_act(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.GroupNorm(min(8, cout), cout), nn.SiLU())


class DecoupledHead(nn.Module):
    """Shared 1x1 stem, then separate 3x3 branches for class logits and for
    objectness + box parameters."""

    def __init__(self, dim: int, n_classes: int = NUM_CLASSES):
        super().__init__()
        self.stem = _conv_act(dim, dim, 1)
        self.cls_branch = nn.Sequential(_conv_act(dim, dim, 3), _conv_act(dim, dim, 3))
        self.reg_branch = nn.Sequential(_conv_act(dim, dim, 3), _conv_act(dim, dim, 3))
        self.cls_out = nn.Conv2d(dim, n_classes, 1)
        self.reg_out = nn.Conv2d(dim, 5, 1)

    def final_convs(self) -> list[nn.Conv2d]:
        return [self.cls_out, self.reg_out]

    def set_obj_prior(self, p: float) -> None:
        with torch.no_grad():
            self.reg_out.bias[0] = -math.log((1 - p) / p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        return torch.cat([self.cls_out(self.cls_branch(x)), self.reg_out(self.reg_branch(x))], dim=1)


class CoupledHead(nn.Module):
    """Single shared branch predicting all C + 1 + 4 channels."""

    def __init__(self, dim: int, n_classes: int = NUM_CLASSES):
        super().__init__()
        self.stem = _conv_act(dim, dim, 1)
        self.branch = nn.Sequential(_conv_act(dim, dim, 3), _conv_act(dim, dim, 3))
        self.out = nn.Conv2d(dim, n_classes + 5, 1)

    def final_convs(self) -> list[nn.Conv2d]:
        return [self.out]

    def set_obj_prior(self, p: float) -> None:
        with torch.no_grad():
            self.out.bias[OBJ] = -math.log((1 - p) / p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.branch(self.stem(x)))


def make_head(kind: str, dim: int) -> nn.Module:
    if kind == "decoupled":
        return DecoupledHead(dim)
    if kind == "coupled":
        return CoupledHead(dim)
    raise ValueError(f"unknown head kind {kind!r}")


def zero_init_final(head: nn.Module) -> None:
    for conv in head.final_convs():
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)


# -- box coding -----------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    cls: VehicleState
    score: float

    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_grid(out: np.ndarray, stride: int, image_size: int, clip: bool = False) -> np.ndarray:
    """Decode an (N, N, 8) head grid into (N*N, 4) boxes (cx, cy, w, h), row-major.

    cx = (i + sigmoid(tx)) * stride, w = exp(tw) * stride * BASE_SCALE, with
    w and h clamped to the image size. With ``clip`` the box corners are also
    clipped to the image, which moves the center of boxes that cross the border.
    """
    n = out.shape[0]
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    t = out[..., BOX].astype(np.float64)
    cx = (i + _sigmoid(t[..., 0])) * stride
    cy = (j + _sigmoid(t[..., 1])) * stride
    tw = np.clip(t[..., 2], -_TW_CLAMP, _TW_CLAMP)
    th = np.clip(t[..., 3], -_TW_CLAMP, _TW_CLAMP)
    w = np.minimum(np.exp(tw) * stride * BASE_SCALE, image_size)
    h = np.minimum(np.exp(th) * stride * BASE_SCALE, image_size)
    if not clip:
        return np.stack([cx, cy, w, h], axis=-1).reshape(-1, 4)
    x0 = np.clip(cx - w / 2, 0, image_size)
    x1 = np.clip(cx + w / 2, 0, image_size)
    y0 = np.clip(cy - h / 2, 0, image_size)
    y1 = np.clip(cy + h / 2, 0, image_size)
    boxes = np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)
    return boxes.reshape(-1, 4)


def scores_and_classes(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """score = sigmoid(obj) * sigmoid(max class logit); class = argmax logit."""
    logits = out[..., :NUM_CLASSES].astype(np.float64).reshape(-1, NUM_CLASSES)
    obj = out[..., OBJ].astype(np.float64).reshape(-1)
    return _sigmoid(obj) * _sigmoid(logits.max(axis=1)), logits.argmax(axis=1)


def decode_boxes(out: np.ndarray, stride: int, image_size: int, score_thresh: float = 0.0, clip: bool = False) -> list[Detection]:
    """All cells of one level as detections (optionally score-filtered and clipped)."""
    boxes = decode_grid(out, stride, image_size, clip)
    scores, classes = scores_and_classes(out)
    keep = np.nonzero(scores >= score_thresh)[0]
    return [
        Detection(*map(float, boxes[k]), VehicleState(int(classes[k])), float(scores[k]))
        for k in keep
        if boxes[k, 2] > 0 and boxes[k, 3] > 0
    ]


def encode_box(box: GroundTruthBox | Sequence[float], stride: int, eps: float = 1e-9) -> tuple[int, int, np.ndarray]:
    """Inverse of the decode formula: cell (i, j) and (tx, ty, tw, th)."""
    cx, cy, w, h = (box.cx, box.cy, box.w, box.h) if isinstance(box, GroundTruthBox) else box
    i, j = int(cx // stride), int(cy // stride)
    fx = min(max(cx / stride - i, eps), 1 - eps)
    fy = min(max(cy / stride - j, eps), 1 - eps)
    t = np.array([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)), math.log(w / (stride * BASE_SCALE)), math.log(h / (stride * BASE_SCALE))])
    return i, j, t


# -- targets ----------------------------------------------------------------------

def level_for_box(w: float, h: float, enabled: Sequence[int] = STRIDES, bands: Sequence[float] = SIZE_BANDS) -> int:
    """Size-band level for a box, moved to the nearest enabled level if needed."""
    side = max(w, h)
    idx = 0 if side < bands[0] else (1 if side < bands[1] else 2)
    candidates = [STRIDES.index(s) for s in enabled]
    best = min(candidates, key=lambda c: (abs(c - idx), c))
    return STRIDES[best]


@dataclass
class LevelTargets:
    obj: torch.Tensor    # (B, N, N) float {0, 1}
    cls: torch.Tensor    # (B, N, N) long, -1 where unassigned
    box: torch.Tensor    # (B, N, N, 4) target cx, cy, w, h in pixels


@dataclass
class Targets:
    levels: dict[int, LevelTargets]
    collisions: int = 0
    assigned: list = field(default_factory=list)


def assign_targets(
    gts: Sequence[Sequence[GroundTruthBox]],
    image_size: int,
    strides: Sequence[int] = STRIDES,
    bands: Sequence[float] = SIZE_BANDS,
) -> Targets:
    """One positive cell per ground-truth box.

    The level is chosen by the box's long side (below bands[0] -> stride 8,
    below bands[1] -> 16, else 32); the cell is the one containing the center.
    When two boxes land in the same cell the larger one wins and the
    collision counter is incremented.
    """
    b = len(gts)
    levels = {}
    for s in strides:
        n = level_size(image_size, s)
        levels[s] = LevelTargets(torch.zeros(b, n, n), torch.full((b, n, n), -1, dtype=torch.long), torch.zeros(b, n, n, 4))
    owner_area: dict[tuple[int, int, int, int], float] = {}
    collisions = 0
    assigned = []
    for bi, boxes in enumerate(gts):
        for box in boxes:
            s = level_for_box(box.w, box.h, strides, bands)
            n = level_size(image_size, s)
            i = min(int(box.cx // s), n - 1)
            j = min(int(box.cy // s), n - 1)
            key = (bi, s, j, i)
            area = box.w * box.h
            if key in owner_area:
                collisions += 1
                if area <= owner_area[key]:
                    continue
            owner_area[key] = area
            lt = levels[s]
            lt.obj[bi, j, i] = 1.0
            lt.cls[bi, j, i] = int(box.cls)
            lt.box[bi, j, i] = torch.tensor([box.cx, box.cy, box.w, box.h])
            assigned.append(key)
    return Targets(levels, collisions, assigned)


# -- loss --------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    conf: torch.Tensor
    cls: torch.Tensor
    bbox: torch.Tensor
    total: torch.Tensor
    n_pos: int = 0

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("conf", "cls", "bbox", "total")}


def combine_losses(conf, cls, bbox):
    return LOSS_WEIGHTS["conf"] * conf + LOSS_WEIGHTS["cls"] * cls + LOSS_WEIGHTS["bbox"] * bbox


def decode_torch(out: torch.Tensor, stride: int) -> torch.Tensor:
    """Differentiable decode of (B, 8, N, N) head output to (B, N, N, 4) boxes, unclipped."""
    n = out.shape[-1]
    j, i = torch.meshgrid(torch.arange(n, dtype=out.dtype), torch.arange(n, dtype=out.dtype), indexing="ij")
    t = out[:, BOX]
    cx = (i + torch.sigmoid(t[:, 0])) * stride
    cy = (j + torch.sigmoid(t[:, 1])) * stride
    w = torch.exp(t[:, 2].clamp(-_TW_CLAMP, _TW_CLAMP)) * stride * BASE_SCALE
    h = torch.exp(t[:, 3].clamp(-_TW_CLAMP, _TW_CLAMP)) * stride * BASE_SCALE
    return torch.stack([cx, cy, w, h], dim=-1)


def ciou(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Complete IoU between (..., 4) center-format boxes."""
    p0, p1 = pred[..., :2] - pred[..., 2:] / 2, pred[..., :2] + pred[..., 2:] / 2
    t0, t1 = target[..., :2] - target[..., 2:] / 2, target[..., :2] + target[..., 2:] / 2
    wh = (torch.minimum(p1, t1) - torch.maximum(p0, t0)).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = pred[..., 2] * pred[..., 3] + target[..., 2] * target[..., 3] - inter
    iou = inter / (union + eps)
    enclose = torch.maximum(p1, t1) - torch.minimum(p0, t0)
    c2 = (enclose ** 2).sum(-1) + eps
    rho2 = ((pred[..., :2] - target[..., :2]) ** 2).sum(-1)
    v = (4 / math.pi ** 2) * (torch.atan(target[..., 2] / (target[..., 3] + eps)) - torch.atan(pred[..., 2] / (pred[..., 3] + eps))) ** 2
    # alpha is kept in the graph so the loss gradient is exact
    alpha = v / (v - iou + 1 + eps)
    return iou - rho2 / c2 - alpha * v


def compute_loss(outs: dict[int, torch.Tensor], targets: Targets) -> LossBreakdown:
    """Weighted detection loss (weights 1/1/5 for conf/cls/bbox).

    Objectness BCE is summed over every cell of every level, class CE and
    (1 - CIoU) over positive cells only; all three sums are divided by the
    number of positives (by 1 when there are none).
    """
    conf_sum = 0.0
    cls_sum = 0.0
    bbox_sum = 0.0
    n_pos = 0
    for s, out in outs.items():
        lt = targets.levels[s]
        if out.shape[1] != N_OUT or out.shape[-2:] != lt.obj.shape[-2:]:
            raise ShapeError(f"head output {tuple(out.shape)} does not match level {s} targets {tuple(lt.obj.shape)}")
        obj_t = lt.obj.to(out.dtype)
        conf_sum = conf_sum + F.binary_cross_entropy_with_logits(out[:, OBJ], obj_t, reduction="sum")
        pos = lt.cls >= 0
        k = int(pos.sum())
        if k:
            logits = out[:, :NUM_CLASSES].permute(0, 2, 3, 1)[pos]
            cls_sum = cls_sum + F.cross_entropy(logits, lt.cls[pos], reduction="sum")
            pred = decode_torch(out, s)[pos]
            bbox_sum = bbox_sum + (1.0 - ciou(pred, lt.box.to(out.dtype)[pos])).sum()
            n_pos += k
    zero = next(iter(outs.values())).new_zeros(())
    conf = conf_sum / max(n_pos, 1)
    cls = cls_sum / n_pos if n_pos else zero
    bbox = bbox_sum / n_pos if n_pos else zero
    total = combine_losses(conf, cls, bbox)
    breakdown = LossBreakdown(conf, cls, bbox, total, n_pos)
    bad = [name for name, v in breakdown.as_floats().items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss terms {bad}: {breakdown.as_floats()} (n_pos={n_pos})")
    return breakdown


# -- NMS --------------------------------------------------------------------------

def box_iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x0 = boxes[:, 0] - boxes[:, 2] / 2
    x1 = boxes[:, 0] + boxes[:, 2] / 2
    y0 = boxes[:, 1] - boxes[:, 3] / 2
    y1 = boxes[:, 1] + boxes[:, 3] / 2
    iw = np.clip(np.minimum(x1[:, None], x1[None]) - np.maximum(x0[:, None], x0[None]), 0, None)
    ih = np.clip(np.minimum(y1[:, None], y1[None]) - np.maximum(y0[:, None], y0[None]), 0, None)
    inter = iw * ih
    area = boxes[:, 2] * boxes[:, 3]
    return inter / np.maximum(area[:, None] + area[None] - inter, 1e-12)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.45, score_thresh: float = 0.05, max_dets: int | None = 100) -> list[Detection]:
    """Class-wise greedy suppression in descending score order (ties by index)."""
    cand = [(k, d) for k, d in enumerate(dets) if d.score >= score_thresh]
    kept: list[tuple[int, Detection]] = []
    for c in range(NUM_CLASSES):
        group = sorted(((k, d) for k, d in cand if int(d.cls) == c), key=lambda kd: (-kd[1].score, kd[0]))
        if not group:
            continue
        ious = box_iou_matrix(np.array([d.box() for _, d in group]))
        alive = np.ones(len(group), dtype=bool)
        for a in range(len(group)):
            if not alive[a]:
                continue
            kept.append(group[a])
            alive[a + 1:] &= ious[a, a + 1:] < iou_thresh
    kept.sort(key=lambda kd: (-kd[1].score, kd[0]))
    out = [d for _, d in kept]
    return out[:max_dets] if max_dets else out
