"""Heterogeneity-aware audio-visual transformer.

Visual cells of the squeezed stride-32 map and time-frequency cells of the
audio feature map become one token sequence. Full self-attention routes
information across both modalities; then a grid of learned aggregation
queries cross-attends into that memory and is reshaped into a g x g
evidence map aligned with the visual grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

VISUAL, AUDIO = 0, 1


@dataclass
class TokenSequence:
    tokens: torch.Tensor         # (B, N, E)
    modality: torch.Tensor       # (N,) VISUAL / AUDIO
    positions: torch.Tensor      # (N, 2) row, col within the token's own grid

    @property
    def n_visual(self) -> int:
        return int((self.modality == VISUAL).sum())

    @property
    def n_audio(self) -> int:
        return int((self.modality == AUDIO).sum())

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.modality, self.positions)


def _grid_positions(h: int, w: int) -> torch.Tensor:
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return torch.stack([rows.reshape(-1), cols.reshape(-1)], dim=1)


def sincos_grid(g: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding of a g x g grid, row-major, shape (g*g, dim)."""
    if dim % 4:
        raise ShapeError(f"sinusoidal grid encoding needs dim divisible by 4, got {dim}")
    pos = _grid_positions(g, g).float()
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter).float() / quarter))
    parts = []
    for axis in (0, 1):
        angles = pos[:, axis:axis + 1] * freqs[None]
        parts += [torch.sin(angles), torch.cos(angles)]
    return torch.cat(parts, dim=1)


class Patchify(nn.Module):
    """One token per spatial cell of each map: linear projection, then
    learned positional and modality embeddings are added. The projections
    have no bias (the positional embeddings play that role), so an all-zero
    map yields exactly the embeddings."""

    def __init__(self, visual_channels: int, visual_grid: tuple[int, int], audio_channels: int, audio_grid: tuple[int, int], embed_dim: int):
        super().__init__()
        self.visual_grid = tuple(visual_grid)
        self.audio_grid = tuple(audio_grid)
        self.visual_proj = nn.Linear(visual_channels, embed_dim, bias=False)
        self.audio_proj = nn.Linear(audio_channels, embed_dim, bias=False)
        n_v = visual_grid[0] * visual_grid[1]
        n_a = audio_grid[0] * audio_grid[1]
        self.visual_pos = nn.Parameter(torch.zeros(n_v, embed_dim))
        self.audio_pos = nn.Parameter(torch.zeros(n_a, embed_dim))
        self.modality_embed = nn.Parameter(torch.zeros(2, embed_dim))
        for p in (self.visual_pos, self.audio_pos, self.modality_embed):
            nn.init.trunc_normal_(p, std=0.02)
        modality = torch.cat([torch.full((n_v,), VISUAL), torch.full((n_a,), AUDIO)])
        positions = torch.cat([_grid_positions(*visual_grid), _grid_positions(*audio_grid)])
        self.register_buffer("modality", modality, persistent=False)
        self.register_buffer("positions", positions, persistent=False)

    def forward(self, vmap: torch.Tensor, amap: torch.Tensor) -> TokenSequence:
        # vmap: (B, visual channels, h, w); amap: (B, audio channels, freq, time)
        if tuple(vmap.shape[-2:]) != self.visual_grid or tuple(amap.shape[-2:]) != self.audio_grid:
            raise ShapeError(
                f"patchify configured for visual {self.visual_grid} / audio {self.audio_grid}, "
                f"got {tuple(vmap.shape[-2:])} / {tuple(amap.shape[-2:])}"
            )
        v = self.visual_proj(vmap.flatten(2).transpose(1, 2)) + self.visual_pos + self.modality_embed[VISUAL]
        a = self.audio_proj(amap.flatten(2).transpose(1, 2)) + self.audio_pos + self.modality_embed[AUDIO]
        return TokenSequence(torch.cat([v, a], dim=1), self.modality, self.positions)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention that also returns its weights."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        memory = x if memory is None else memory
        b, n, d = x.shape
        hd = d // self.heads
        q = self.q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k, v = self.kv(memory).view(b, memory.shape[1], 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y), weights


class MLP(nn.Sequential):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class SelfAttentionLayer(nn.Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, self.last_weights = self.attn(self.norm1(x))
        x = x + y
        return x + self.mlp(self.norm2(x))


class JointSelfAttention(nn.Module):
    """Stack of self-attention layers over the concatenated audio-visual tokens.

    No modality masking: every token attends to every other token.
    """

    def __init__(self, dim: int, depth: int = 12, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(SelfAttentionLayer(dim, heads, mlp_ratio) for _ in range(depth))

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        for layer in self.layers:
            y = layer(x)
            if y.shape != x.shape:
                raise ShapeError(f"self-attention layer changed shape {tuple(x.shape)} -> {tuple(y.shape)}")
            x = y
        return seq.with_tokens(x)


class SCAQSet(nn.Module):
    """Learned grid-aligned aggregation queries, g*g slots in row-major order."""

    def __init__(self, n_queries: int, dim: int):
        super().__init__()
        g = math.isqrt(n_queries)
        if g * g != n_queries:
            raise ShapeError(f"number of aggregation queries must be a square, got {n_queries}")
        self.grid_shape = (g, g)
        self.queries = nn.Parameter(torch.empty(n_queries, dim))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.register_buffer("grid_code", sincos_grid(g, dim), persistent=False)

    def forward(self) -> torch.Tensor:
        return self.queries + self.grid_code


class SPCALayer(nn.Module):
    """Cross-attention from queries into the memory, then a feed-forward block."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_mem = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)
        self.last_weights: torch.Tensor | None = None
        self.last_pooled: torch.Tensor | None = None

    def forward(self, q: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        pooled, self.last_weights = self.attn(self.norm_q(q), self.norm_mem(memory))
        self.last_pooled = pooled
        q = q + pooled
        return q + self.mlp(self.norm2(q))


class SPCA(nn.Module):
    """Spatial-pulling cross-attention producing the (B, E, g, g) evidence map."""

    def __init__(self, n_queries: int, dim: int, n_layers: int = 2, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.scaq = SCAQSet(n_queries, dim)
        self.layers = nn.ModuleList(SPCALayer(dim, heads, mlp_ratio) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, memory: TokenSequence) -> torch.Tensor:
        mem = memory.tokens
        q = self.scaq().unsqueeze(0).expand(mem.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, mem)
        g, _ = self.scaq.grid_shape
        q = self.norm(q)
        return q.transpose(1, 2).reshape(q.shape[0], q.shape[2], g, g)


class HAVTFusion(nn.Module):
    """patchify -> joint self-attention -> SPCA."""

    def __init__(
        self,
        visual_channels: int,
        visual_grid: tuple[int, int],
        audio_channels: int,
        audio_grid: tuple[int, int],
        embed_dim: int = 128,
        depth: int = 12,
        heads: int = 4,
        n_scaq: int = 49,
        spca_layers: int = 2,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.patchify = Patchify(visual_channels, visual_grid, audio_channels, audio_grid, embed_dim)
        self.encoder = JointSelfAttention(embed_dim, depth, heads, mlp_ratio)
        self.spca = SPCA(n_scaq, embed_dim, spca_layers, heads, mlp_ratio)

    def forward(self, vmap: torch.Tensor, amap: torch.Tensor) -> torch.Tensor:
        return self.spca(self.encoder(self.patchify(vmap, amap)))


def resample_map(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear upsampling or area downsampling of a (B, C, g, g) map to size x size."""
    if x.shape[-1] == size:
        return x
    if x.shape[-1] < size:
        return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return F.adaptive_avg_pool2d(x, size)
