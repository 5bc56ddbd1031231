"""Domain types, on-disk dataset layout and deterministic splits.

Layout of one sample directory::

    <root>/<split>/<sample_id>/
        video.f32    raw little-endian float32, frames x channels x H x W
        video.shape  sidecar: ``shape=16,3,224,224`` and ``dtype=<f4``
        audio.f32    raw little-endian float32, mics x samples
        audio.shape
        boxes.txt    one ``cls cx cy w h`` line per box
        meta.txt     ``key=value`` lines (includes ``seed``, ``frame_rate``,
                     ``sample_rate``)

Boxes are center format in absolute last-frame pixels.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError

DTYPE_TAG = "<f4"
SPLITS = ("train", "val", "test")
ALLOWED_MIC_COUNTS = (1, 3, 6)
_RESERVED_META = ("frame_rate", "sample_rate")


class VehicleState(enum.IntEnum):
    MOVING = 0
    IDLING = 1
    ENGINE_OFF = 2


CLASS_NAMES = ("moving", "idling", "engine_off")
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class VideoClip:
    """Frames of shape (D_frames, C, H, W), values in [0, 1]."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def validate(self) -> None:
        if self.frames.ndim != 4:
            raise ValidationError(f"VideoClip.frames must be 4-D (D,C,H,W), got shape {self.frames.shape}")
        if self.frames.shape[1] != 3:
            raise ValidationError(f"VideoClip channel count must be 3, got {self.frames.shape[1]}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("VideoClip.frames contains non-finite values")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValidationError("VideoClip.frames must lie in [0, 1]")
        if not self.frame_rate > 0:
            raise ValidationError("VideoClip.frame_rate must be positive")


@dataclass
class AudioSegment:
    """Multi-channel waveform of shape (M_mics, S_samples), values in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)

    @property
    def n_mics(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate

    def validate(self) -> None:
        if self.samples.ndim != 2:
            raise ValidationError(f"AudioSegment.samples must be 2-D (M,S), got shape {self.samples.shape}")
        if self.n_mics not in ALLOWED_MIC_COUNTS:
            raise ValidationError(f"AudioSegment mic count must be one of {ALLOWED_MIC_COUNTS}, got {self.n_mics}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("AudioSegment.samples contains non-finite values")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise ValidationError("AudioSegment.samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValidationError("AudioSegment.sample_rate must be positive")


@dataclass(frozen=True)
class GroundTruthBox:
    cx: float
    cy: float
    w: float
    h: float
    cls: VehicleState

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "cls", VehicleState(int(self.cls)))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float, state) -> "GroundTruthBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, VehicleState(state))

    def validate(self, width: int, height: int) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box w,h must be positive, got w={self.w} h={self.h}")
        x0, y0, x1, y1 = self.corners()
        tol = 1e-9 * max(width, height)
        if x0 < -tol or y0 < -tol or x1 > width + tol or y1 > height + tol:
            raise ValidationError(f"box corners ({x0}, {y0}, {x1}, {y1}) not inside the {width}x{height} image")


def clamp_box(box: GroundTruthBox, width: int, height: int) -> GroundTruthBox:
    """Clip a box to the image; in-bounds boxes come back unchanged."""
    x0, y0, x1, y1 = box.corners()
    if x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height:
        return box
    x0, x1 = max(x0, 0.0), min(x1, float(width))
    y0, y1 = max(y0, 0.0), min(y1, float(height))
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"box {box} has no area inside the {width}x{height} image")
    return GroundTruthBox.from_corners(x0, y0, x1, y1, box.cls)


@dataclass
class Sample:
    clip: VideoClip
    audio: AudioSegment
    boxes: list[GroundTruthBox] = field(default_factory=list)
    scene_meta: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        self.clip.validate()
        self.audio.validate()
        for box in self.boxes:
            box.validate(self.clip.width, self.clip.height)
        for key, value in self.scene_meta.items():
            if key in _RESERVED_META:
                raise ValidationError(f"scene_meta key {key!r} is reserved")
            if "=" in key or "\n" in key or "\n" in str(value):
                raise ValidationError(f"scene_meta entry {key!r} cannot be stored as a key=value line")

    def class_counts(self) -> list[int]:
        counts = [0] * NUM_CLASSES
        for box in self.boxes:
            counts[int(box.cls)] += 1
        return counts


# -- serialization -----------------------------------------------------------

def _write_tensor(array: np.ndarray, stem: Path) -> None:
    data = np.ascontiguousarray(array, dtype=DTYPE_TAG)
    stem.with_suffix(".f32").write_bytes(data.tobytes())
    shape = ",".join(str(d) for d in array.shape)
    stem.with_suffix(".shape").write_text(f"shape={shape}\ndtype={DTYPE_TAG}\n")


def _read_tensor(stem: Path) -> np.ndarray:
    fields = _parse_kv(stem.with_suffix(".shape").read_text())
    if fields.get("dtype") != DTYPE_TAG:
        raise ValidationError(f"{stem}.shape: unsupported dtype {fields.get('dtype')!r}")
    shape = tuple(int(d) for d in fields["shape"].split(",") if d)
    raw = np.fromfile(stem.with_suffix(".f32"), dtype=DTYPE_TAG)
    if raw.size != math.prod(shape):
        raise ValidationError(f"{stem}.f32 holds {raw.size} values, descriptor says {shape}")
    return raw.reshape(shape).astype(np.float32)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"malformed key=value line: {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_sample(sample: Sample, path: str | os.PathLike) -> None:
    """Serialize ``sample`` into directory ``path`` (created if missing)."""
    sample.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_tensor(sample.clip.frames, path / "video")
    _write_tensor(sample.audio.samples, path / "audio")
    lines = [f"{int(b.cls)} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}" for b in sample.boxes]
    (path / "boxes.txt").write_text("".join(line + "\n" for line in lines))
    meta = {"frame_rate": repr(float(sample.clip.frame_rate)), "sample_rate": str(int(sample.audio.sample_rate))}
    meta.update({k: str(v) for k, v in sample.scene_meta.items()})
    (path / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_boxes(path: str | os.PathLike) -> list[GroundTruthBox]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        cls, cx, cy, w, h = line.split()
        boxes.append(GroundTruthBox(float(cx), float(cy), float(w), float(h), VehicleState(int(cls))))
    return boxes


def read_sample(path: str | os.PathLike) -> Sample:
    path = Path(path)
    meta = _parse_kv((path / "meta.txt").read_text())
    frame_rate = float(meta.pop("frame_rate"))
    sample_rate = int(meta.pop("sample_rate"))
    sample = Sample(
        clip=VideoClip(_read_tensor(path / "video"), frame_rate),
        audio=AudioSegment(_read_tensor(path / "audio"), sample_rate),
        boxes=read_boxes(path / "boxes.txt"),
        scene_meta=meta,
    )
    sample.validate()
    return sample


def list_samples(split_root: str | os.PathLike) -> list[Path]:
    """Sample directories under one split directory, in id order."""
    root = Path(split_root)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset split at {root}")
    return sorted(p for p in root.iterdir() if (p / "meta.txt").exists())


# -- splits --------------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` items over three ratios."""
    if len(ratios) != 3:
        raise ConfigError(f"expected three split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be nonnegative and sum to 1, got {tuple(ratios)}")
    exact = [n * r for r in ratios]
    # round() first so values like 8.000000000000002 do not lose a unit to floor
    sizes = [math.floor(round(x, 9)) for x in exact]
    rest = n - sum(sizes)
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return tuple(sizes)


def split_dataset(samples: Sequence | int, ratios: Sequence[float], seed: int) -> tuple[list[int], list[int], list[int]]:
    """Partition sample indices into disjoint (train, val, test) index lists."""
    n = samples if isinstance(samples, int) else len(samples)
    n_train, n_val, _ = split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    train = sorted(perm[:n_train].tolist())
    val = sorted(perm[n_train:n_train + n_val].tolist())
    test = sorted(perm[n_train + n_val:].tolist())
    return train, val, test
