"""Hierarchical nested-transformer encoder with 3D block aggregation.

Token grids are channels-last tensors ``(b, h, w, d, C)``.  Blockify splits a
grid into ``g^3`` contiguous sub-cubes (``T`` blocks of ``n`` tokens) so that
self-attention runs independently inside each block, with one weight set per
layer shared by every block.  Between hierarchies the grid is re-assembled,
convolved and max-pooled by 2, which keeps ``n`` fixed and divides ``T`` by 8.

Flatten order everywhere is row-major with the depth axis fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .config import GeometryError, ModelConfig
from .nn import Conv3d, LayerNorm, Linear, Module, trunc_normal
from .tensor import Tensor, parameter


@dataclass(frozen=True)
class BlockLayout:
    """Geometry of a blockified grid: extents ``(h, w, d)`` split ``g`` ways per axis."""

    grid: tuple[int, int, int]
    g: int

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(e // self.g for e in self.grid)

    @property
    def T(self) -> int:
        return self.g**3

    @property
    def n(self) -> int:
        return math.prod(self.extent)


def blockify(grid: Tensor, g: int) -> Tensor:
    """``(b, h, w, d, C)`` -> ``(b, g^3, n, C)``.

    Block ``(i, j, k)`` holds the token sub-cube starting at ``(i*eh, j*ew, k*ed)``;
    blocks and the tokens inside each block are both ordered row-major.
    """
    b, h, w, d, c = grid.shape
    if g < 1 or h % g or w % g or d % g:
        raise GeometryError(f"grid extents {(h, w, d)} not divisible by block grid {g}")
    eh, ew, ed = h // g, w // g, d // g
    x = grid.reshape(b, g, eh, g, ew, g, ed, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, g**3, eh * ew * ed, c)


def unblockify(seq: Tensor, g: int, grid: tuple[int, int, int]) -> Tensor:
    """Exact inverse of :func:`blockify`."""
    b, t, n, c = seq.shape
    h, w, d = grid
    if t != g**3:
        raise GeometryError(f"sequence has {t} blocks but block grid {g} implies {g ** 3}")
    if h % g or w % g or d % g or n != (h // g) * (w // g) * (d // g):
        raise GeometryError(f"sequence length {n} inconsistent with grid {grid} split {g} ways")
    eh, ew, ed = h // g, w // g, d // g
    x = seq.reshape(b, g, g, g, eh, ew, ed, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, h, w, d, c)


class PatchEmbed(Module):
    """Linear projection of non-overlapping ``S^3 * C_in`` patches to ``C'`` channels."""

    def __init__(self, in_channels: int, patch, width: int, rng):
        self.patch = tuple(patch)
        self.proj = Linear(in_channels * math.prod(self.patch), width, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, c, H, W, D = x.shape
        sh, sw, sd = self.patch
        if H % sh or W % sw or D % sd:
            raise GeometryError(f"volume extents {(H, W, D)} must be multiples of patch {self.patch}")
        h, w, d = H // sh, W // sw, D // sd
        x = x.reshape(b, c, h, sh, w, sw, d, sd)
        x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
        x = x.reshape(b, h, w, d, c * sh * sw * sd)
        return self.proj(x)


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng):
        if width % heads:
            raise GeometryError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)

    def forward(self, x: Tensor, return_attention: bool = False):
        b, t, n, c = x.shape
        h = self.heads
        sigma = c // h
        qkv = self.qkv(x).reshape(b, t, n, 3, h, sigma).permute(3, 0, 1, 4, 2, 5)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ops.softmax((q * (1.0 / math.sqrt(sigma))) @ k.transpose(-1, -2), axis=-1)
        out = (attn @ v).permute(0, 1, 3, 2, 4).reshape(b, t, n, c)
        out = self.proj(out)
        return (out, attn) if return_attention else out


class MLP(Module):
    def __init__(self, width: int, ratio: int, rng):
        self.fc1 = Linear(width, ratio * width, rng)
        self.fc2 = Linear(ratio * width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm layer applied to every block with the same weights."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng):
        self.width = width
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio, rng)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.width:
            raise GeometryError(f"layer width {self.width} does not match input channels {z.shape[-1]}")
        z_hat = self.attn(self.norm1(z)) + z
        return self.mlp(self.norm2(z_hat)) + z_hat


class Hierarchy(Module):
    """Blockify, add positional embedding, run the layer stack, unblockify."""

    def __init__(self, width: int, heads: int, depth: int, mlp_ratio: int, layout: BlockLayout, rng):
        self.layout = layout
        self.pos_embed = parameter(trunc_normal(rng, (layout.T, layout.n, width)))
        self.layers = [TransformerLayer(width, heads, mlp_ratio, rng) for _ in range(depth)]

    def forward(self, grid: Tensor) -> Tensor:
        if tuple(grid.shape[1:4]) != self.layout.grid:
            raise GeometryError(f"hierarchy expects token grid {self.layout.grid}, got {tuple(grid.shape[1:4])}")
        z = blockify(grid, self.layout.g) + self.pos_embed
        for layer in self.layers:
            z = layer(z)
        return unblockify(z, self.layout.g, self.layout.grid)


class Aggregate(Module):
    """Merge blocks spatially: 3^3 conv then 2^3 max-pool, halving each extent."""

    def __init__(self, in_width: int, out_width: int, rng):
        self.conv = Conv3d(in_width, out_width, 3, rng, padding=1)

    def forward(self, grid: Tensor) -> Tensor:
        if any(e % 2 for e in grid.shape[1:4]):
            raise GeometryError(f"aggregation needs even extents, got {tuple(grid.shape[1:4])}")
        x = grid.permute(0, 4, 1, 2, 3)
        x = ops.max_pool3d(self.conv(x), 2)
        return x.permute(0, 2, 3, 4, 1)


class NestEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.patch, cfg.widths[0], rng)
        grids = cfg.block_grids()
        self.hierarchies = []
        self.aggregates = []
        for level in range(cfg.hierarchies):
            layout = BlockLayout(cfg.token_grid(level), grids[level])
            self.hierarchies.append(
                Hierarchy(cfg.widths[level], cfg.heads[level], cfg.depths[level], cfg.mlp_ratio, layout, rng)
            )
            if level < cfg.hierarchies - 1:
                self.aggregates.append(Aggregate(cfg.widths[level], cfg.widths[level + 1], rng))
        self.norm = LayerNorm(cfg.widths[-1])

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        """Returns per-hierarchy outputs (channels-last grids) and the normed encoder output."""
        expect = (self.cfg.in_channels,) + tuple(self.cfg.window)
        if tuple(x.shape[1:]) != expect:
            raise GeometryError(f"encoder expects input (b, {expect}), got {x.shape}")
        grid = self.patch_embed(x)
        skips = []
        for level, hier in enumerate(self.hierarchies):
            grid = hier(grid)
            skips.append(grid)
            if level < len(self.aggregates):
                grid = self.aggregates[level](grid)
        return skips, self.norm(skips[-1])


def encode(volume: Tensor, encoder: NestEncoder) -> dict:
    skips, out = encoder(volume)
    return {"skips": skips[:-1], "hierarchies": skips, "output": out}
