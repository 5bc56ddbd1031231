"""Visual and audio encoders plus the per-level temporal squeeze.

Tensors are channels-first inside the network: a pyramid level is
(B, D_l, L_l, h, w) and a squeezed map is (B, E, h, w).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError

STRIDES = (8, 16, 32)


def _groups(channels: int) -> int:
    return min(8, channels)


def _conv3d_block(cin: int, cout: int, t_stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=(t_stride, 2, 2), padding=1, bias=False),
        nn.GroupNorm(_groups(cout), cout),
        nn.SiLU(),
    )


def _ceil_half(n: int) -> int:
    return (n + 1) // 2


def level_size(image_size: int, stride: int) -> int:
    """Grid side of a pyramid level (exact division for multiples of 32)."""
    return -(-image_size // stride)


@dataclass
class VisualPyramid:
    p8: torch.Tensor
    p16: torch.Tensor
    p32: torch.Tensor

    def levels(self) -> dict[int, torch.Tensor]:
        return {8: self.p8, 16: self.p16, 32: self.p32}


class VisualEncoder(nn.Module):
    """Stride-2 3D conv stack: a stem then four stages.

    Spatial strides after the stem and stages are 2, 4, 8, 16, 32; the last
    three stages feed the pyramid. The time axis is halved in the stem and in
    the last two stages, so 16 input frames give L = (8, 4, 2).
    """

    def __init__(self, n_frames: int = 16, image_size: int = 224, widths=(16, 32, 64, 128), stem_width: int = 16):
        super().__init__()
        self.n_frames = n_frames
        self.image_size = image_size
        self.stem = _conv3d_block(3, stem_width, 2)
        t_strides = (1, 1, 2, 2)
        chans = (stem_width,) + tuple(widths)
        self.stages = nn.ModuleList(_conv3d_block(chans[i], chans[i + 1], t_strides[i]) for i in range(4))
        L = _ceil_half(n_frames)
        lengths = []
        for t in t_strides:
            L = _ceil_half(L) if t == 2 else L
            lengths.append(L)
        self.temporal_lengths = tuple(lengths[1:])
        self.level_channels = tuple(widths[1:])

    def forward(self, video: torch.Tensor) -> VisualPyramid:
        # video: (B, D_frames, C, H, W)
        expected = (self.n_frames, 3, self.image_size, self.image_size)
        if video.ndim != 5 or tuple(video.shape[1:]) != expected:
            raise ShapeError(f"video must be (B, {', '.join(map(str, expected))}), got {tuple(video.shape)}")
        x = self.stem(video.permute(0, 2, 1, 3, 4))
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        pyr = VisualPyramid(*outs[1:])
        for stride, p in pyr.levels().items():
            side = level_size(self.image_size, stride)
            if p.shape[-1] != side or p.shape[-2] != side:
                raise ShapeError(f"level {stride} has spatial size {tuple(p.shape[-2:])}")
        return pyr


class AudioEncoder(nn.Module):
    """2D conv stack over (mel, time) with the microphones as input channels.

    Five stride-2 3x3 convolutions with padding 1 give ceil-division by 32,
    so (128, 469) maps to (4, 15) without dropping the last partial window.
    """

    def __init__(self, n_mics: int = 6, widths=(16, 32, 64, 96, 128)):
        super().__init__()
        self.n_mics = n_mics
        layers = []
        cin = n_mics
        for cout in widths:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False), nn.GroupNorm(_groups(cout), cout), nn.SiLU()]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    @staticmethod
    def output_size(n_mels: int, n_frames: int) -> tuple[int, int]:
        return -(-n_mels // 32), -(-n_frames // 32)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (B, M, n_mels, T)
        if mel.ndim != 4 or mel.shape[1] != self.n_mics:
            raise ShapeError(f"audio encoder configured for {self.n_mics} mics, got input {tuple(mel.shape)}")
        return self.body(mel)


class TemporalSqueeze(nn.Module):
    """1x1xL 3D convolution: collapses time and projects to ``embed_dim``."""

    def __init__(self, in_channels: int, length: int, embed_dim: int):
        super().__init__()
        self.length = length
        self.proj = nn.Conv3d(in_channels, embed_dim, (length, 1, 1))

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.ndim != 5 or p.shape[2] != self.length:
            raise ShapeError(f"squeeze expects temporal extent {self.length}, got input {tuple(p.shape)}")
        return self.proj(p).squeeze(2)

