"""Synthetic audio-visual vehicle scenes.

A scene is a static textured background with 1..n rectangular vehicles.
Moving vehicles translate across the clip and emit speed-gated noise
bursts; idling vehicles are stationary and emit a low harmonic stack;
engine-off vehicles are stationary and silent. Idling and engine-off
vehicles are therefore indistinguishable in the video, and only the
per-microphone level of the harmonic stack tells them apart.

Random streams are split so that the video of a scene does not depend on
vehicle states: background, vehicle geometry/appearance, states, source
signals and sensor noise each come from their own child seed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import (
    ALLOWED_MIC_COUNTS,
    CLASS_NAMES,
    NUM_CLASSES,
    SPLITS,
    AudioSegment,
    GroundTruthBox,
    Sample,
    VehicleState,
    VideoClip,
    split_dataset,
    write_sample,
)
from .errors import ConfigError

MAX_PLACEMENT_ATTEMPTS = 100
N_HARMONICS = 5


def default_mic_positions(n_mics: int, scene_size: float) -> list[tuple[float, float]]:
    """Evenly spread microphones: a 3x2 grid, a triangle, or a single mic."""
    s = scene_size
    grid = [(s * fx, s * fy) for fy in (0.25, 0.75) for fx in (1 / 6, 0.5, 5 / 6)]
    if n_mics == 6:
        return grid
    if n_mics == 3:
        return [grid[i] for i in mic_subset(3)]
    if n_mics == 1:
        return [grid[i] for i in mic_subset(1)]
    raise ConfigError(f"mic count must be one of {ALLOWED_MIC_COUNTS}, got {n_mics}")


def mic_subset(n_mics: int) -> list[int]:
    """Channels of the default 6-mic layout kept when ablating to fewer mics."""
    return {6: [0, 1, 2, 3, 4, 5], 3: [0, 2, 4], 1: [1]}[n_mics]


@dataclass(frozen=True)
class SceneConfig:
    n_vehicles: tuple[int, int] = (1, 3)
    image_size: int = 224
    n_frames: int = 16
    frame_rate: float = 8.0
    sample_rate: int = 48000
    duration: float = 5.0
    scene_size_m: float = 30.0
    mic_positions: tuple[tuple[float, float], ...] = tuple(default_mic_positions(6, 30.0))
    state_priors: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    idle_fundamental_hz: tuple[float, float] = (25.0, 45.0)
    # px/frame at the configured image size
    motion_speed: tuple[float, float] = (3.0, 8.0)
    # long side of a vehicle as a fraction of the image side
    vehicle_size: tuple[float, float] = (0.1, 0.65)
    vehicle_aspect: tuple[float, float] = (0.5, 0.9)
    snr_db: tuple[float, float] = (10.0, 20.0)
    source_level: float = 0.05
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "SceneConfig":
        """Reduced scene used for CPU training runs: 64 px, 8 frames, 16 kHz."""
        base = dict(image_size=64, n_frames=8, sample_rate=16000, motion_speed=(1.5, 3.0))
        base.update(overrides)
        return cls(**base)

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def meters_per_pixel(self) -> float:
        return self.scene_size_m / self.image_size

    def with_mics(self, n_mics: int) -> "SceneConfig":
        return replace(self, mic_positions=tuple(default_mic_positions(n_mics, self.scene_size_m)))

    def validate(self) -> None:
        if abs(sum(self.state_priors) - 1.0) > 1e-9 or min(self.state_priors) < 0 or len(self.state_priors) != 3:
            raise ConfigError(f"state_priors must be a probability triple, got {self.state_priors}")
        if self.n_mics not in ALLOWED_MIC_COUNTS:
            raise ConfigError(f"mic count must be one of {ALLOWED_MIC_COUNTS}, got {self.n_mics}")
        for name in ("n_vehicles", "idle_fundamental_hz", "motion_speed", "vehicle_size", "vehicle_aspect", "snr_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {(lo, hi)}")
        if self.n_vehicles[0] < 0:
            raise ConfigError("n_vehicles must be nonnegative")
        if self.n_frames < 2 or self.image_size < 8:
            raise ConfigError("scene needs at least 2 frames and 8 px")
        if self.idle_fundamental_hz[1] * N_HARMONICS >= self.sample_rate / 2:
            raise ConfigError("idle harmonics exceed the Nyquist frequency")


@dataclass
class Vehicle:
    """Geometry and appearance of one vehicle; the state is stored separately."""

    x0: int
    y0: int
    w: int
    h: int
    color: np.ndarray
    texture: np.ndarray
    velocity: tuple[float, float]
    start_frame: int
    state: VehicleState = VehicleState.ENGINE_OFF
    fundamental: float = 0.0

    def box(self) -> GroundTruthBox:
        return GroundTruthBox(self.x0 + self.w / 2, self.y0 + self.h / 2, float(self.w), float(self.h), self.state)

    def offset(self, frame: int, n_frames: int) -> tuple[int, int]:
        """Pixel displacement relative to the last frame."""
        if self.state != VehicleState.MOVING:
            return 0, 0
        steps = (n_frames - 1) - max(frame, self.start_frame)
        return -round(self.velocity[0] * steps), -round(self.velocity[1] * steps)


@dataclass
class SceneLayout:
    background: np.ndarray
    vehicles: list[Vehicle]
    snr_db: float
    n_requested: int
    streams: dict[str, np.random.SeedSequence] = field(repr=False, default_factory=dict)


def _child(parent: np.random.SeedSequence, index: int) -> np.random.SeedSequence:
    # unlike spawn(), this does not advance the parent's child counter
    return np.random.SeedSequence(parent.entropy, spawn_key=parent.spawn_key + (index,))


def _streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("background", "vehicles", "states", "sources", "noise")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def _overlaps(a: Vehicle, b: Vehicle, gap: int = 1) -> bool:
    return not (a.x0 + a.w + gap <= b.x0 or b.x0 + b.w + gap <= a.x0 or a.y0 + a.h + gap <= b.y0 or b.y0 + b.h + gap <= a.y0)


def scene_layout(config: SceneConfig, seed: int) -> SceneLayout:
    """Draw background, vehicles and states for one scene."""
    config.validate()
    streams = _streams(seed)
    size = config.image_size

    rng = np.random.default_rng(streams["background"])
    base = rng.uniform(0.3, 0.6)
    background = np.clip(base + 0.04 * rng.standard_normal((3, size, size)), 0.0, 1.0)

    rng = np.random.default_rng(streams["vehicles"])
    n_requested = int(rng.integers(config.n_vehicles[0], config.n_vehicles[1] + 1))
    vehicles: list[Vehicle] = []
    for _ in range(n_requested):
        placed = None
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            long_side = rng.uniform(*config.vehicle_size) * size
            w = max(2, min(size, int(round(long_side))))
            h = max(2, min(size, int(round(long_side * rng.uniform(*config.vehicle_aspect)))))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            color = rng.uniform(0.05, 0.95, size=3)
            texture = 0.06 * rng.standard_normal((h, w))
            speed = rng.uniform(*config.motion_speed)
            angle = rng.uniform(-0.3, 0.3) + (math.pi if rng.random() < 0.5 else 0.0)
            start = int(rng.integers(0, config.n_frames // 2))
            candidate = Vehicle(x0, y0, w, h, color, texture, (speed * math.cos(angle), speed * math.sin(angle)), start)
            if not any(_overlaps(candidate, v) for v in vehicles):
                placed = candidate
                break
        if placed is None:
            # overcrowded: keep the vehicles placed so far
            break
        vehicles.append(placed)

    rng = np.random.default_rng(streams["states"])
    for v in vehicles:
        v.state = VehicleState(int(rng.choice(NUM_CLASSES, p=np.asarray(config.state_priors))))
        v.fundamental = float(rng.uniform(*config.idle_fundamental_hz))
    snr = float(rng.uniform(*config.snr_db))
    return SceneLayout(background, vehicles, snr, n_requested, streams)


def render_video(config: SceneConfig, layout: SceneLayout) -> np.ndarray:
    """Frames (D, 3, H, W), quantized to 8-bit levels."""
    size = config.image_size
    rng = np.random.default_rng(_child(layout.streams["background"], 0))
    frames = np.repeat(layout.background[None], config.n_frames, axis=0)
    frames = frames + 0.01 * rng.standard_normal(frames.shape)
    for k in range(config.n_frames):
        for v in layout.vehicles:
            dx, dy = v.offset(k, config.n_frames)
            x0, y0 = v.x0 + dx, v.y0 + dy
            xa, xb = max(x0, 0), min(x0 + v.w, size)
            ya, yb = max(y0, 0), min(y0 + v.h, size)
            if xa >= xb or ya >= yb:
                continue
            patch = v.color[:, None, None] + v.texture[None, ya - y0:yb - y0, xa - x0:xb - x0]
            frames[k, :, ya:yb, xa:xb] = patch
    return (np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def mic_gains(config: SceneConfig, vehicle: Vehicle) -> np.ndarray:
    """Per-mic gain 1 / (1 + d) for the vehicle's last-frame center."""
    box = vehicle.box()
    pos = np.array([box.cx, box.cy]) * config.meters_per_pixel
    mics = np.asarray(config.mic_positions, dtype=np.float64)
    d = np.linalg.norm(mics - pos, axis=1)
    return 1.0 / (1.0 + d)


def frame_times(config: SceneConfig) -> np.ndarray:
    """Audio-time (s) of each video frame; the last frame sits at the window center."""
    k = np.arange(config.n_frames)
    return config.duration / 2 - (config.n_frames - 1 - k) / config.frame_rate


def source_signal(config: SceneConfig, vehicle: Vehicle, rng: np.random.Generator) -> np.ndarray:
    """Dry source waveform of one vehicle at unit distance, RMS ``source_level``."""
    n = config.n_samples
    t = np.arange(n) / config.sample_rate
    if vehicle.state == VehicleState.IDLING:
        sig = np.zeros(n)
        phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
        for k in range(1, N_HARMONICS + 1):
            sig += np.sin(2 * np.pi * k * vehicle.fundamental * t + phases[k - 1]) / k
        return sig * config.source_level / np.sqrt(np.mean(sig ** 2))
    if vehicle.state == VehicleState.MOVING:
        noise = rng.standard_normal(n)
        # bursts: one random gain per frame period, gated on once the vehicle starts moving
        t_start = frame_times(config)[vehicle.start_frame]
        period = 1.0 / config.frame_rate
        n_periods = int(np.ceil(config.duration / period)) + 1
        burst = rng.uniform(0.5, 1.0, n_periods)[np.minimum((t / period).astype(int), n_periods - 1)]
        ramp = np.clip((t - t_start) / 0.05, 0.0, 1.0)
        return noise * burst * ramp * config.source_level
    return np.zeros(n)


def render_audio(config: SceneConfig, layout: SceneLayout, muted: Sequence[int] = ()) -> np.ndarray:
    """Mixed (M, S) waveform; ``muted`` lists vehicle indices to leave out."""
    n = config.n_samples
    mix = np.zeros((config.n_mics, n))
    for i, v in enumerate(layout.vehicles):
        if i in muted:
            continue
        sig = source_signal(config, v, np.random.default_rng(_child(layout.streams["sources"], i)))
        mix += mic_gains(config, v)[:, None] * sig[None, :]
    noise_rms = config.source_level * 10.0 ** (-layout.snr_db / 20.0)
    mix += noise_rms * np.random.default_rng(layout.streams["noise"]).standard_normal(mix.shape)
    return np.clip(mix, -1.0, 1.0)


def generate_scene(config: SceneConfig, seed: int) -> Sample:
    layout = scene_layout(config, seed)
    video = render_video(config, layout)
    audio = render_audio(config, layout)
    meta = {
        "seed": str(seed),
        "n_requested": str(layout.n_requested),
        "n_vehicles": str(len(layout.vehicles)),
        "snr_db": repr(layout.snr_db),
        "states": ",".join(CLASS_NAMES[v.state] for v in layout.vehicles),
        "fundamentals_hz": ",".join(f"{v.fundamental:.3f}" for v in layout.vehicles),
    }
    return Sample(
        clip=VideoClip(video, config.frame_rate),
        audio=AudioSegment(audio, config.sample_rate),
        boxes=[v.box() for v in layout.vehicles],
        scene_meta=meta,
    )


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _write_one(args) -> tuple[str, list[int]]:
    config, index, path = args
    sample = generate_scene(config, sample_seed(config.seed, index))
    write_sample(sample, path)
    return path.name, sample.class_counts()


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ";".join(",".join(str(x) for x in v) for v in value)
        return ",".join(str(v) for v in value)
    return str(value)


def config_lines(config: SceneConfig) -> list[str]:
    """``scene.key=value`` lines, readable back as a config file."""
    return [f"scene.{k}={_format_value(v)}" for k, v in asdict(config).items()]


def mirror_permutation(config: SceneConfig, axis: str) -> list[int]:
    """Mic index map for a scene mirrored left-right (``axis="x"``) or top-bottom (``"y"``).

    Entry ``c`` is the mic whose position is the mirror image of mic ``c``:
    in the mirrored scene mic ``c`` hears what mic ``perm[c]`` heard in the
    original, because the gain depends only on distance. Raises ConfigError
    when the layout is not symmetric about that axis.
    """
    k = {"x": 0, "y": 1}[axis]
    pos = np.asarray(config.mic_positions, dtype=np.float64)
    mirrored = pos.copy()
    mirrored[:, k] = config.scene_size_m - pos[:, k]
    perm = []
    for m in mirrored:
        hit = np.flatnonzero(np.all(np.abs(pos - m) <= 1e-9 * config.scene_size_m, axis=1))
        if len(hit) != 1:
            raise ConfigError(f"mic layout is not symmetric about the {axis} mid-line")
        perm.append(int(hit[0]))
    return perm


def generate_corpus(
    config: SceneConfig,
    n: int,
    root: str | os.PathLike,
    ratios: tuple[float, float, float] = (0.75, 0.125, 0.125),
    workers: int = 1,
) -> Path:
    """Write ``n`` scenes under ``root/<split>/<id>`` plus ``manifest.txt``."""
    config.validate()
    root = Path(root)
    split_of = {}
    for name, indices in zip(SPLITS, split_dataset(n, ratios, config.seed)):
        for i in indices:
            split_of[i] = name
    jobs = [(config, i, root / split_of[i] / f"{i:06d}") for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_write_one, jobs, chunksize=16))
    else:
        results = [_write_one(job) for job in jobs]
    lines = ["# sample_id split " + " ".join(f"n_{c}" for c in CLASS_NAMES)]
    for (sid, counts), i in zip(results, range(n)):
        lines.append(f"{sid} {split_of[i]} " + " ".join(str(c) for c in counts))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "scene.txt").write_text("\n".join(config_lines(config)) + "\n")
    return root


def read_manifest(root: str | os.PathLike) -> list[tuple[str, str, list[int]]]:
    rows = []
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        sid, split, *counts = line.split()
        rows.append((sid, split, [int(c) for c in counts]))
    return rows
