"""Run configuration and the ``section.key=value`` config file format.

Example file::

    # comments and blank lines are ignored
    run.lr=0.001
    run.batch=16
    run.scales_enabled=8,16,32
    model.embed_dim=64
    model.depth=4
    scene.image_size=64

``run.*`` keys map to :class:`RunConfig`, ``model.*`` keys to the model
hyperparameters in ``RunConfig.model`` and ``scene.*`` keys to the
:class:`~havt_ivd.synthetic_scene.SceneConfig` used by ``gen``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, get_type_hints

from ..encoders import STRIDES
from ..errors import ConfigError
from ..model import FUSIONS, HEADS
from ..synthetic_scene import SceneConfig

SCAQ_CHOICES = (49, 196, 784)
MIC_CHOICES = (1, 3, 6)


@dataclass
class ModelHyper:
    """Model widths/depths; input geometry comes from the dataset."""

    embed_dim: int = 128
    depth: int = 12
    heads: int = 4
    spca_layers: int = 2
    mlp_ratio: int = 4
    visual_widths: tuple[int, ...] = (16, 32, 64, 128)
    audio_widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    obj_prior: float = 0.01

    @classmethod
    def desk(cls) -> "ModelHyper":
        return cls(embed_dim=64, depth=4, audio_widths=(16, 32, 48, 64, 64), visual_widths=(16, 32, 48, 64))


@dataclass
class RunConfig:
    scales_enabled: tuple[int, ...] = STRIDES
    n_scaq: int = 49
    head: str = "decoupled"
    mics: int = 6
    fusion: str = "havt"
    lr: float = 1e-3
    batch: int = 16
    max_epochs: int = 100
    patience: int = 50
    seed: int = 0
    score_thresh: float = 0.05
    nms_iou: float = 0.45
    size_bands: tuple[float, float] = (64.0, 128.0)
    eval_every: int = 1
    augment_flips: bool = False
    model: ModelHyper = field(default_factory=ModelHyper)

    def validate(self) -> None:
        if not self.scales_enabled or any(s not in STRIDES for s in self.scales_enabled):
            raise ConfigError(f"scales_enabled must be a nonempty subset of {STRIDES}, got {self.scales_enabled}")
        if len(set(self.scales_enabled)) != len(self.scales_enabled):
            raise ConfigError(f"duplicate scales in {self.scales_enabled}")
        if self.n_scaq not in SCAQ_CHOICES:
            raise ConfigError(f"n_scaq must be one of {SCAQ_CHOICES}, got {self.n_scaq}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.mics not in MIC_CHOICES:
            raise ConfigError(f"mics must be one of {MIC_CHOICES}, got {self.mics}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.lr > 0 or self.batch < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("lr must be positive, batch and max_epochs >= 1, patience >= 0")
        if not self.size_bands[0] < self.size_bands[1]:
            raise ConfigError(f"size_bands must be increasing, got {self.size_bands}")

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            if f.name == "model":
                continue
            lines.append(f"run.{f.name}={_format(getattr(self, f.name))}")
        for f in fields(self.model):
            lines.append(f"model.{f.name}={_format(getattr(self.model, f.name))}")
        return lines

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:12]


def desk_run_config(**overrides) -> RunConfig:
    """Configuration used for CPU-scale training on desk-profile scenes."""
    base = dict(size_bands=(64.0 * 64 / 224, 128.0 * 64 / 224), model=ModelHyper.desk())
    base.update(overrides)
    return RunConfig(**base)


def _format(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ";".join(",".join(str(x) for x in v) for v in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(raw: str, hint, key: str):
    origin = getattr(hint, "__origin__", None)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        if origin is tuple:
            args = hint.__args__
            if args and getattr(args[0], "__origin__", None) is tuple:
                inner = args[0].__args__[0]
                return tuple(tuple(inner(x) for x in part.split(",")) for part in raw.split(";") if part)
            elem = args[0]
            return tuple(elem(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r}: {exc}") from None
    raise ConfigError(f"unsupported config type for {key}")


def _apply(obj, section: str, key: str, raw: str):
    hints = get_type_hints(type(obj))
    if key not in hints or key == "model":
        raise ConfigError(f"unknown config key {section}.{key}")
    return replace(obj, **{key: _coerce(raw, hints[key], f"{section}.{key}")})


def parse_lines(lines: Iterable[str]) -> list[tuple[str, str, str]]:
    entries = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"line {n}: expected section.key=value, got {line!r}")
        entries.append((section, name, value.strip()))
    return entries


def apply_entries(
    entries: Iterable[tuple[str, str, str]],
    run: RunConfig | None = None,
    scene: SceneConfig | None = None,
) -> tuple[RunConfig, SceneConfig]:
    run = run or RunConfig()
    scene = scene or SceneConfig()
    for section, key, value in entries:
        if section == "run":
            run = _apply(run, section, key, value)
        elif section == "model":
            run = replace(run, model=_apply(run.model, section, key, value))
        elif section == "scene":
            scene = _apply(scene, section, key, value)
        else:
            raise ConfigError(f"unknown config section {section!r}")
    run.validate()
    scene.validate()
    return run, scene


def load_config(path: str | os.PathLike | None, overrides: Iterable[str] = (), base: RunConfig | None = None, scene: SceneConfig | None = None) -> tuple[RunConfig, SceneConfig]:
    """Read a config file (optional) and then apply ``section.key=value`` overrides."""
    entries = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        entries += parse_lines(text.splitlines())
    entries += parse_lines(overrides)
    return apply_entries(entries, base, scene)


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    model = ModelHyper(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("model").items()})
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return RunConfig(model=model, **d)


def to_dict(run: RunConfig) -> dict:
    return dataclasses.asdict(run)
