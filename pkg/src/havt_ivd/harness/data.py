"""In-memory dataset over one split directory, with cached spectrograms."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..audio_frontend import HOP, compute_melspec, n_stft_frames, standardize_pooled
from ..data_model import AudioSegment, GroundTruthBox, list_samples, read_sample
from ..errors import ConfigError
from ..synthetic_scene import SceneConfig, mic_subset, mirror_permutation


@dataclass
class DataGeometry:
    image_size: int
    n_frames: int
    sample_rate: int
    n_samples: int
    n_mics_available: int

    @property
    def n_audio_frames(self) -> int:
        return n_stft_frames(self.n_samples, HOP)


FLIP_STATES = ((False, False), (True, False), (False, True), (True, True))


def read_scene_config(corpus_root: str | os.PathLike) -> SceneConfig:
    """Generator settings recorded in ``<corpus>/scene.txt``."""
    from .config import load_config

    return load_config(Path(corpus_root) / "scene.txt")[1]


def mirrored_box(box: GroundTruthBox, size: int, flip_x: bool, flip_y: bool) -> GroundTruthBox:
    cx = size - box.cx if flip_x else box.cx
    cy = size - box.cy if flip_y else box.cy
    return GroundTruthBox(cx, cy, box.w, box.h, box.cls)


class SplitDataset:
    """Loads every sample of a split once, keeping video (as uint8 when the
    frames sit on the 8-bit grid) and the log-mel spectrogram of the selected
    microphones.

    Spectrograms are cached as float16 (they are standardized, so the
    rounding error is about 1e-3) and widened to float32 per batch.

    With ``flips=True`` batches can be drawn mirrored left-right and/or
    top-bottom. A mirrored scene is an exact scene of the same generator:
    frames and boxes are mirrored, and each mic takes the channel of the
    mic at its mirror position (gains depend only on distance). This needs
    a mic layout that is symmetric about both mid-lines, read from the
    corpus ``scene.txt``.
    """

    def __init__(self, split_root: str | os.PathLike, mics: int = 6, flips: bool = False):
        self.root = Path(split_root)
        self.mics = mics
        self.flips = flips
        self.paths = list_samples(self.root)
        if not self.paths:
            raise FileNotFoundError(f"split {self.root} holds no samples")
        self.ids = [p.name for p in self.paths]
        self.videos: list[np.ndarray] = []
        self.boxes: list[list[GroundTruthBox]] = []
        self.geometry: DataGeometry | None = None
        # channel tuple per flip state; spectrograms are cached once per channel set
        self._channels: dict[tuple[bool, bool], tuple[int, ...]] = {}
        self._mels: dict[frozenset, list[np.ndarray]] = {}
        for path in self.paths:
            self._load(path)

    def _flip_channels(self, n_available: int) -> None:
        base = tuple(range(n_available)) if n_available == self.mics else tuple(mic_subset(self.mics))
        if n_available != self.mics and n_available != 6:
            raise ValueError(f"cannot select {self.mics} mics from a {n_available}-channel sample")
        self._channels[(False, False)] = base
        if self.flips:
            scene = read_scene_config(self.root.parent)
            if scene.n_mics != n_available:
                raise ConfigError(f"scene.txt lists {scene.n_mics} mics but samples have {n_available}")
            px, py = mirror_permutation(scene, "x"), mirror_permutation(scene, "y")
            for fx, fy in FLIP_STATES[1:]:
                chans = base
                if fx:
                    chans = tuple(px[c] for c in chans)
                if fy:
                    chans = tuple(py[c] for c in chans)
                self._channels[(fx, fy)] = chans
        self._mels = {frozenset(c): [] for c in self._channels.values()}

    def _load(self, path: Path) -> None:
        s = read_sample(path)
        if self.geometry is None:
            self.geometry = DataGeometry(s.clip.width, s.clip.n_frames, s.audio.sample_rate, s.audio.samples.shape[1], s.audio.n_mics)
            self._flip_channels(s.audio.n_mics)
        frames = s.clip.frames
        q = np.round(frames * 255.0).clip(0, 255).astype(np.uint8)
        lossless = np.array_equal(q.astype(np.float32) / np.float32(255.0), frames)
        self.videos.append(q if lossless else frames)
        raw = compute_melspec(AudioSegment(s.audio.samples, s.audio.sample_rate), standardize=False).values
        for chans, store in self._mels.items():
            # standardization pools over the selected mics only, as for an unflipped subset
            store.append(standardize_pooled(raw[sorted(chans)]).astype(np.float16))
        self.boxes.append(s.boxes)

    def mel(self, k: int, flip: tuple[bool, bool] = (False, False)) -> np.ndarray:
        chans = self._channels[flip]
        order = sorted(chans)
        stored = self._mels[frozenset(chans)][k]
        return stored[[order.index(c) for c in chans]]

    @property
    def mels(self) -> list[np.ndarray]:
        return self._mels[frozenset(self._channels[(False, False)])]

    def __len__(self) -> int:
        return len(self.ids)

    def video(self, k: int) -> np.ndarray:
        v = self.videos[k]
        return v.astype(np.float32) / np.float32(255.0) if v.dtype == np.uint8 else v

    def batch(self, indices, flips=None) -> tuple[torch.Tensor, torch.Tensor, list[list[GroundTruthBox]]]:
        """Stack samples; ``flips`` holds one (mirror x, mirror y) pair per index."""
        indices = list(indices)
        if flips is None:
            flips = [(False, False)] * len(indices)
        elif not self.flips and any(any(f) for f in flips):
            raise ValueError("dataset was loaded without flips=True")
        size = self.geometry.image_size
        videos, mels, boxes = [], [], []
        for k, (fx, fy) in zip(indices, flips):
            fx, fy = bool(fx), bool(fy)
            v = self.video(k)
            if fx:
                v = v[..., ::-1]
            if fy:
                v = v[..., ::-1, :]
            videos.append(np.ascontiguousarray(v))
            mels.append(self.mel(k, (fx, fy)))
            boxes.append([mirrored_box(b, size, fx, fy) for b in self.boxes[k]] if fx or fy else self.boxes[k])
        video = torch.from_numpy(np.stack(videos))
        mel = torch.from_numpy(np.stack(mels).astype(np.float32))
        return video, mel, boxes

    def split_hash(self) -> str:
        return hashlib.sha256("\n".join(self.ids).encode()).hexdigest()[:16]
