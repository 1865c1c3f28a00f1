"""U-shaped convolutional decoder.

Stages run from the deepest token grid back to full resolution.  Each stage
upsamples with a stride-2 transpose convolution, concatenates a skip tensor
and applies a residual block.  Skips come from the encoder hierarchies first,
then from image-derived features at the resolutions between the patch grid and
the input (patch 4 gives 48^3 and 96^3 for a 96^3 window).
"""

from __future__ import annotations

import math

from . import ops
from .config import GeometryError, ModelConfig
from .nn import Conv3d, ConvTranspose3d, Module
from .tensor import Tensor, concat

NEGATIVE_SLOPE = 0.01


class ResidualBlock(Module):
    """``act(shortcut(x) + IN(conv2(act(IN(conv1(x))))))`` with 3^3 convs."""

    def __init__(self, in_channels: int, out_channels: int, rng):
        self.in_channels = in_channels
        self.conv1 = Conv3d(in_channels, out_channels, 3, rng, padding=1, bias=False)
        self.conv2 = Conv3d(out_channels, out_channels, 3, rng, padding=1, bias=False)
        self.shortcut = (
            Conv3d(in_channels, out_channels, 1, rng, bias=False) if in_channels != out_channels else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise GeometryError(f"residual block expects {self.in_channels} channels, got {x.shape[1]}")
        h = ops.leaky_relu(ops.instance_norm(self.conv1(x)), NEGATIVE_SLOPE)
        h = ops.instance_norm(self.conv2(h))
        short = x if self.shortcut is None else self.shortcut(x)
        return ops.leaky_relu(h + short, NEGATIVE_SLOPE)


class ImageSkip(Module):
    """Image-derived skip at ``1/2^level`` of the input resolution."""

    def __init__(self, in_channels: int, out_channels: int, level: int, rng):
        self.stride = 2**level
        self.down = Conv3d(in_channels, out_channels, 3, rng, stride=self.stride, padding=1) if level else None
        self.block = ResidualBlock(out_channels if level else in_channels, out_channels, rng)

    def forward(self, image: Tensor) -> Tensor:
        x = image if self.down is None else self.down(image)
        return self.block(x)


class UpStage(Module):
    def __init__(self, in_channels: int, out_channels: int, rng):
        self.up = ConvTranspose3d(in_channels, out_channels, 2, rng, stride=2)
        self.block = ResidualBlock(2 * out_channels, out_channels, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(x)
        if up.shape[2:] != skip.shape[2:]:
            raise GeometryError(f"upsampled {up.shape[2:]} does not match skip {skip.shape[2:]}")
        return self.block(concat([up, skip], axis=1))


class ConvDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        dec = cfg.resolved_decoder_widths()
        n_hier_skips = cfg.hierarchies - 1
        n_image_skips = int(math.log2(cfg.patch[0]))
        self.bottleneck = Conv3d(cfg.widths[-1], dec[0], 3, rng, padding=1)
        # deepest first, matching stage order
        self.hierarchy_skips = [
            ResidualBlock(cfg.widths[level], dec[1 + i], rng)
            for i, level in enumerate(reversed(range(n_hier_skips)))
        ]
        self.image_skips = [
            ImageSkip(cfg.in_channels, dec[1 + n_hier_skips + i], level, rng)
            for i, level in enumerate(reversed(range(n_image_skips)))
        ]
        self.stages = [UpStage(dec[s], dec[s + 1], rng) for s in range(cfg.upsample_stages)]
        self.head = Conv3d(dec[-1], cfg.classes, 1, rng)

    def forward(self, image: Tensor, skips: list[Tensor], encoder_output: Tensor) -> Tensor:
        """``skips`` are channels-first hierarchy outputs, shallowest first."""
        if len(skips) != len(self.hierarchy_skips):
            raise GeometryError(f"decoder expects {len(self.hierarchy_skips)} hierarchy skips, got {len(skips)}")
        sources = [blk(s) for blk, s in zip(self.hierarchy_skips, reversed(skips))]
        sources += [blk(image) for blk in self.image_skips]
        x = self.bottleneck(encoder_output)
        for i, (stage, skip) in enumerate(zip(self.stages, sources)):
            try:
                x = stage(x, skip)
            except GeometryError as exc:
                raise GeometryError(f"decoder stage {i}: {exc}") from exc
        return self.head(x)
