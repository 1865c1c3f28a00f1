"""Model assembly, parameter accounting and FLOP estimation."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, scale_config
from .decoder import ConvDecoder
from .encoder import NestEncoder
from .nn import Module
from .tensor import Tensor, default_dtype, no_grad


class UNesT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = NestEncoder(cfg, rng)
        self.decoder = ConvDecoder(cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        """``(b, C_in, H, W, D)`` -> logits ``(b, K, H, W, D)``."""
        hier, out = self.encoder(x)
        skips = [h.permute(0, 4, 1, 2, 3) for h in hier[:-1]]
        return self.decoder(x, skips, out.permute(0, 4, 1, 2, 3))

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(np.asarray(x, dtype=self.dtype))).data

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.norm.weight.dtype


def build(scale_or_cfg: str | ModelConfig, seed: int = 0, dtype=None, **overrides) -> UNesT:
    """Build a model from a scale name (``S``/``B``/``L``) or an explicit config."""
    cfg = scale_or_cfg if isinstance(scale_or_cfg, ModelConfig) else scale_config(scale_or_cfg, **overrides)
    cfg.validate()
    rng = np.random.default_rng(seed)
    if dtype is None:
        return UNesT(cfg, rng)
    with default_dtype(dtype):
        return UNesT(cfg, rng)


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def param_report(model: Module, depth: int = 2) -> "OrderedDict[str, int]":
    """Parameter totals grouped by the first ``depth`` components of each name."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.size
    return out


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

FLOP_CONVENTION = (
    "1 multiply-add = 2 FLOPs; matmul 2*m*k*n; conv 2*kernel_volume*C_in*C_out*output_voxels; "
    "attention 2*T*n^2*sigma*heads for QK^T and again for AV; norms, activations, softmax, "
    "pooling and additions excluded"
)


@dataclass
class FlopReport:
    window: tuple[int, int, int]
    parts: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    convention: str = FLOP_CONVENTION

    def add(self, key: str, flops: int) -> None:
        self.parts[key] = self.parts.get(key, 0) + int(flops)

    @property
    def total(self) -> int:
        return int(sum(self.parts.values()))

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def conv_total(self) -> int:
        return int(sum(v for k, v in self.parts.items() if k.startswith("decoder") or k.endswith("aggregate")))


def conv_flops(k: int, c_in: int, c_out: int, out_voxels: int) -> int:
    return 2 * k**3 * c_in * c_out * out_voxels


def attention_flops(T: int, n: int, width: int, heads: int) -> int:
    """QK^T plus attention-times-V for one layer."""
    sigma = width // heads
    return 2 * (2 * T * n * n * sigma * heads)


def layer_flops(tokens: int, T: int, n: int, width: int, heads: int, mlp_ratio: int) -> dict[str, int]:
    return {
        "qkv": 2 * tokens * width * 3 * width,
        "attention": attention_flops(T, n, width, heads),
        "proj": 2 * tokens * width * width,
        "mlp": 2 * 2 * tokens * width * mlp_ratio * width,
    }


def estimate_flops(model_or_cfg, window=None) -> FlopReport:
    cfg = model_or_cfg.cfg if isinstance(model_or_cfg, UNesT) else model_or_cfg
    window = tuple(cfg.window if window is None else window)
    cfg.validate(window)
    rep = FlopReport(window)
    vol = math.prod(window)
    p = cfg.patch[0]
    grids = cfg.block_grids()

    tokens0 = vol // p**3
    rep.add("encoder.patch_embed", 2 * tokens0 * cfg.in_channels * p**3 * cfg.widths[0])
    for level in range(cfg.hierarchies):
        grid = cfg.token_grid(level, window)
        tokens = math.prod(grid)
        g = grids[level]
        T, n = g**3, tokens // g**3
        for _ in range(cfg.depths[level]):
            for key, v in layer_flops(tokens, T, n, cfg.widths[level], cfg.heads[level], cfg.mlp_ratio).items():
                rep.add(f"encoder.h{level}.{key}", v)
        if level < cfg.hierarchies - 1:
            rep.add(f"encoder.h{level}.aggregate", conv_flops(3, cfg.widths[level], cfg.widths[level + 1], tokens))

    dec = cfg.resolved_decoder_widths()
    deep = math.prod(cfg.token_grid(cfg.hierarchies - 1, window))
    rep.add("decoder.bottleneck", conv_flops(3, cfg.widths[-1], dec[0], deep))

    def res_block(key, cin, cout, vox):
        rep.add(key, conv_flops(3, cin, cout, vox) + conv_flops(3, cout, cout, vox))
        if cin != cout:
            rep.add(key, conv_flops(1, cin, cout, vox))

    n_hier = cfg.hierarchies - 1
    for s in range(cfg.upsample_stages):
        out_vox = deep * 8 ** (s + 1)
        cin, cout = dec[s], dec[s + 1]
        rep.add("decoder.upsample", conv_flops(2, cin, cout, out_vox // 8))
        res_block("decoder.stage_blocks", 2 * cout, cout, out_vox)
        if s < n_hier:
            level = n_hier - 1 - s
            res_block("decoder.hierarchy_skips", cfg.widths[level], cout, out_vox)
        else:
            if out_vox != vol:
                rep.add("decoder.image_skips", conv_flops(3, cfg.in_channels, cout, out_vox))
                res_block("decoder.image_skips", cout, cout, out_vox)
            else:
                res_block("decoder.image_skips", cfg.in_channels, cout, out_vox)
    rep.add("decoder.head", conv_flops(1, dec[-1], cfg.classes, vol))
    return rep


def attention_cost(cfg: ModelConfig, level: int, window=None) -> int:
    """Per-layer attention FLOPs at one hierarchy (the T*n^2 term)."""
    T, n = cfg.block_layout(level, window)
    return attention_flops(T, n, cfg.widths[level], cfg.heads[level])
