"""Full detector: encoders, fusion variant, pyramid fusion and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .audio_frontend import N_MELS, n_stft_frames
from .detection import PyramidFuse, make_head, zero_init_final
from .encoders import STRIDES, AudioEncoder, TemporalSqueeze, VisualEncoder, level_size
from .errors import ConfigError
from .fusion import HAVTFusion

FUSIONS = ("havt", "concat", "none")
HEADS = ("decoupled", "coupled")


@dataclass
class ModelConfig:
    image_size: int = 224
    n_frames: int = 16
    n_mics: int = 6
    n_mels: int = N_MELS
    n_audio_frames: int = 469
    embed_dim: int = 128
    visual_widths: tuple[int, ...] = (16, 32, 64, 128)
    audio_widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    depth: int = 12
    heads: int = 4
    mlp_ratio: int = 4
    n_scaq: int = 49
    spca_layers: int = 2
    scales: tuple[int, ...] = STRIDES
    head: str = "decoupled"
    fusion: str = "havt"
    obj_prior: float = 0.01

    @classmethod
    def for_audio(cls, sample_rate: int, duration: float, hop: int = 512, **kw) -> "ModelConfig":
        return cls(n_audio_frames=n_stft_frames(int(round(sample_rate * duration)), hop), **kw)

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if not self.scales or any(s not in STRIDES for s in self.scales):
            raise ConfigError(f"scales must be a nonempty subset of {STRIDES}, got {self.scales}")
        if self.embed_dim % self.heads or self.embed_dim % 4:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by 4 and by the head count")

    def to_dict(self) -> dict:
        return asdict(self)


class HAVTDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        e = config.embed_dim
        self.scales = tuple(sorted(config.scales))
        self.visual = VisualEncoder(config.n_frames, config.image_size, config.visual_widths)
        self.squeeze = nn.ModuleDict(
            {
                str(s): TemporalSqueeze(c, length, e)
                for s, c, length in zip(STRIDES, self.visual.level_channels, self.visual.temporal_lengths)
            }
        )
        side32 = level_size(config.image_size, 32)
        self.audio_grid = AudioEncoder.output_size(config.n_mels, config.n_audio_frames)
        if config.fusion != "none":
            self.audio = AudioEncoder(config.n_mics, config.audio_widths)
        if config.fusion == "havt":
            self.fusion = HAVTFusion(
                e, (side32, side32), self.audio.out_channels, self.audio_grid,
                embed_dim=e, depth=config.depth, heads=config.heads, n_scaq=config.n_scaq,
                spca_layers=config.spca_layers, mlp_ratio=config.mlp_ratio,
            )
        elif config.fusion == "concat":
            self.audio_pool_proj = nn.Linear(self.audio.out_channels, e)
        extra = 0 if config.fusion == "none" else e
        self.fuse = nn.ModuleDict({str(s): PyramidFuse(e, extra) for s in self.scales})
        self.heads = nn.ModuleDict({str(s): make_head(config.head, e) for s in self.scales})
        for head in self.heads.values():
            head.set_obj_prior(config.obj_prior)

    def zero_init_heads(self) -> None:
        for head in self.heads.values():
            zero_init_final(head)

    def evidence_map(self, squeezed32: torch.Tensor, mel: torch.Tensor | None) -> torch.Tensor | None:
        fusion = self.config.fusion
        if fusion == "none":
            return None
        amap = self.audio(mel)
        if fusion == "havt":
            return self.fusion(squeezed32, amap)
        pooled = self.audio_pool_proj(amap.mean(dim=(2, 3)))
        return pooled[:, :, None, None]

    def trace(self, video: torch.Tensor, mel: torch.Tensor | None) -> dict:
        """Forward pass that keeps every intermediate tensor (for inspection and tests)."""
        pyr = self.visual(video)
        levels = pyr.levels()
        squeezed = {s: self.squeeze[str(s)](levels[s]) for s in STRIDES if s in self.scales or s == 32}
        avce = self.evidence_map(squeezed[32], mel)
        fused = {}
        for s in self.scales:
            fuser = self.fuse[str(s)]
            if avce is None:
                fused[s] = fuser.reduce(squeezed[s])
            else:
                fused[s] = fuser(avce, squeezed[s])
        outs = {s: self.heads[str(s)](fused[s]) for s in self.scales}
        return {"pyramid": pyr, "squeezed": squeezed, "avce": avce, "fused": fused, "outs": outs}

    def forward(self, video: torch.Tensor, mel: torch.Tensor | None = None) -> dict[int, torch.Tensor]:
        return self.trace(video, mel)["outs"]
