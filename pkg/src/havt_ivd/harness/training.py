"""Training, inference and checkpointing."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..detection import Detection, assign_targets, compute_loss, decode_boxes, nms
from ..errors import TrainingAborted
from ..metrics import EvalReport, evaluate_lists, write_detections
from ..model import HAVTDetector, ModelConfig
from .config import RunConfig, from_dict, to_dict
from .data import DataGeometry, SplitDataset

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss_conf,loss_cls,loss_bbox,val_map"


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def build_model(run: RunConfig, geometry: DataGeometry) -> HAVTDetector:
    h = run.model
    config = ModelConfig(
        image_size=geometry.image_size,
        n_frames=geometry.n_frames,
        n_mics=run.mics,
        n_audio_frames=geometry.n_audio_frames,
        embed_dim=h.embed_dim,
        visual_widths=h.visual_widths,
        audio_widths=h.audio_widths,
        depth=h.depth,
        heads=h.heads,
        mlp_ratio=h.mlp_ratio,
        n_scaq=run.n_scaq,
        spca_layers=h.spca_layers,
        scales=tuple(run.scales_enabled),
        head=run.head,
        fusion=run.fusion,
        obj_prior=h.obj_prior,
    )
    return HAVTDetector(config)


@torch.no_grad()
def predict(model: HAVTDetector, data: SplitDataset, run: RunConfig, batch: int = 32) -> list[list[Detection]]:
    model.eval()
    image_size = model.config.image_size
    results = []
    for start in range(0, len(data), batch):
        idx = list(range(start, min(start + batch, len(data))))
        video, mel, _ = data.batch(idx)
        outs = model(video, mel)
        for b in range(len(idx)):
            dets = []
            for s, out in outs.items():
                grid = out[b].permute(1, 2, 0).numpy()
                dets += decode_boxes(grid, s, image_size, score_thresh=run.score_thresh, clip=True)
            results.append(nms(dets, run.nms_iou, run.score_thresh))
    return results


def evaluate_model(model: HAVTDetector, data: SplitDataset, run: RunConfig, det_path: str | os.PathLike | None = None) -> EvalReport:
    dets = predict(model, data, run)
    if det_path is not None:
        write_detections(det_path, dict(zip(data.ids, dets)))
    return evaluate_lists(dets, data.boxes)


def atomic_save(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(path: Path, model: HAVTDetector, run: RunConfig, geometry: DataGeometry, **extra) -> None:
    atomic_save(
        {"model": model.state_dict(), "run": to_dict(run), "geometry": vars(geometry).copy(), **extra},
        path,
    )


def load_checkpoint(path: str | os.PathLike) -> tuple[HAVTDetector, RunConfig, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    run = from_dict(ckpt["run"])
    geometry = DataGeometry(**ckpt["geometry"])
    model = build_model(run, geometry)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, run, ckpt


@dataclass
class EpochRecord:
    epoch: int
    loss_conf: float
    loss_cls: float
    loss_bbox: float
    val_map: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss_conf:.6f},{self.loss_cls:.6f},{self.loss_bbox:.6f},{self.val_map:.6f}"


@dataclass
class TrainResult:
    out_dir: Path
    best_epoch: int
    best_val_map: float
    history: list[EpochRecord] = field(default_factory=list)
    split_hashes: dict[str, str] = field(default_factory=dict)
    stopped_early: bool = False

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / "best.pt"


def train(
    run: RunConfig,
    dataset_root: str | os.PathLike,
    out_dir: str | os.PathLike,
    val_split: str = "val",
    train_split: str = "train",
    datasets: tuple[SplitDataset, SplitDataset] | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
    stop_at: float | None = None,
) -> TrainResult:
    """Optimize the weighted detection loss with Adam at a constant rate.

    After each epoch the model is scored on ``val_split`` (mAP@0.5); the
    best-scoring weights are kept in ``best.pt`` and training stops once
    ``patience`` epochs pass without improvement, or as soon as the score
    reaches ``stop_at`` when that is given. ``log.csv`` records one line per
    epoch.
    """
    run.validate()
    root = Path(dataset_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        train_data = SplitDataset(root / train_split, run.mics, flips=run.augment_flips)
        val_data = train_data if val_split == train_split else SplitDataset(root / val_split, run.mics)
    else:
        train_data, val_data = datasets
    geometry = train_data.geometry

    set_determinism(run.seed)
    model = build_model(run, geometry)
    optimizer = torch.optim.Adam(model.parameters(), lr=run.lr)
    order_rng = np.random.default_rng(run.seed)
    hashes = {train_split: train_data.split_hash(), val_split: val_data.split_hash()}
    (out / "config.txt").write_text("\n".join(run.to_lines()) + "\n")
    log_lines = [LOG_HEADER]
    log_path = out / "log.csv"
    log_path.write_text("\n".join(log_lines) + "\n")
    log.info("train %s | splits %s", out, hashes)

    result = TrainResult(out, best_epoch=-1, best_val_map=-math.inf, split_hashes=hashes)
    save_checkpoint(out / "last.pt", model, run, geometry, epoch=0)
    for epoch in range(1, run.max_epochs + 1):
        model.train()
        t0 = time.time()
        perm = order_rng.permutation(len(train_data))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(perm), run.batch):
            idx = perm[start:start + run.batch].tolist()
            flips = order_rng.random((len(idx), 2)) < 0.5 if run.augment_flips else None
            video, mel, boxes = train_data.batch(idx, flips)
            outs = model(video, mel)
            targets = assign_targets(boxes, geometry.image_size, run.scales_enabled, run.size_bands)
            try:
                loss = compute_loss(outs, targets)
            except FloatingPointError as exc:
                diag = {"epoch": epoch, "batch_start": start, "sample_ids": [train_data.ids[k] for k in idx], "error": str(exc)}
                (out / "abort.txt").write_text("\n".join(f"{k}={v}" for k, v in diag.items()) + "\n")
                raise TrainingAborted(f"non-finite loss at epoch {epoch}; last good weights in {out / 'last.pt'}", diag) from exc
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            sums += [float(loss.conf.detach()), float(loss.cls.detach()), float(loss.bbox.detach())]
            n_batches += 1
        means = sums / max(n_batches, 1)
        if epoch % run.eval_every == 0 or epoch == run.max_epochs:
            val_map = evaluate_model(model, val_data, run).map_50
        else:
            val_map = float("nan")
        record = EpochRecord(epoch, *means.tolist(), val_map)
        result.history.append(record)
        log_lines.append(record.csv())
        log_path.write_text("\n".join(log_lines) + "\n")
        save_checkpoint(out / "last.pt", model, run, geometry, epoch=epoch)
        log.info("epoch %d  %s  (%.1fs)", epoch, record.csv(), time.time() - t0)
        if progress:
            progress(record)
        if not math.isnan(val_map) and val_map > result.best_val_map:
            result.best_val_map = val_map
            result.best_epoch = epoch
            save_checkpoint(out / "best.pt", model, run, geometry, epoch=epoch, val_map=val_map, split_hashes=hashes)
            if stop_at is not None and val_map >= stop_at:
                break
        elif epoch - result.best_epoch > run.patience:
            result.stopped_early = True
            break
    summary = [f"best_epoch={result.best_epoch}", f"best_val_map={result.best_val_map:.6f}", f"stopped_early={int(result.stopped_early)}"]
    summary += [f"split_hash_{k}={v}" for k, v in hashes.items()]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return result
