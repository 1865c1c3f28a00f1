"""Model and training configuration records, standard scales, and config files.

Config files are flat ``key = value`` text, one field per line, with ``#``
comments.  Keys are exactly the field names of :class:`ModelConfig` and
:class:`TrainConfig`; tuple values are comma separated.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path


class GeometryError(ValueError):
    """Input or config extents that the architecture cannot tile."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    classes: int = 2
    patch: tuple[int, int, int] = (4, 4, 4)
    depths: tuple[int, ...] = (2, 2, 8)
    heads: tuple[int, ...] = (4, 8, 16)
    widths: tuple[int, ...] = (128, 256, 512)
    decoder_widths: tuple[int, ...] = ()
    mlp_ratio: int = 4
    block_aggregation: bool = True
    window: tuple[int, int, int] = (96, 96, 96)

    @property
    def hierarchies(self) -> int:
        return len(self.depths)

    @property
    def upsample_stages(self) -> int:
        """Decoder transpose-conv stages from the deepest grid back to full size."""
        return self.hierarchies - 1 + int(math.log2(self.patch[0]))

    def resolved_decoder_widths(self) -> tuple[int, ...]:
        """Bottleneck width followed by the output width of every decoder stage."""
        if self.decoder_widths:
            return tuple(self.decoder_widths)
        out = list(reversed(self.widths))
        while len(out) < self.upsample_stages + 1:
            out.append(max(1, out[-1] // 2))
        return tuple(out)

    def block_grids(self) -> tuple[int, ...]:
        """Blocks per axis at each hierarchy: 2^(N-1-l), or 1 when aggregation is off."""
        n = self.hierarchies
        if not self.block_aggregation:
            return (1,) * n
        return tuple(2 ** (n - 1 - l) for l in range(n))

    def token_grid(self, level: int = 0, window=None) -> tuple[int, int, int]:
        window = self.window if window is None else tuple(window)
        return tuple(window[a] // self.patch[a] // 2**level for a in range(3))

    def block_layout(self, level: int, window=None) -> tuple[int, int]:
        """(T, n) at ``level``: block count and tokens per block."""
        g = self.block_grids()[level]
        grid = self.token_grid(level, window)
        n = math.prod(e // g for e in grid)
        return g**3, n

    def validate(self, window=None) -> None:
        window = self.window if window is None else tuple(window)
        problems = []
        lens = {len(self.depths), len(self.heads), len(self.widths)}
        if len(lens) != 1:
            problems.append(f"depths/heads/widths lengths differ: {sorted(lens)}")
        if any(d <= 0 for d in self.depths):
            problems.append(f"depths must be positive, got {self.depths}")
        for w, h in zip(self.widths, self.heads):
            if h <= 0 or w % h:
                problems.append(f"width {w} not divisible by heads {h}")
        p = self.patch
        if len(set(p)) != 1 or not _is_pow2(p[0]):
            problems.append(f"patch must be a cubic power of two, got {p}")
        if len(self.decoder_widths) not in (0, self.upsample_stages + 1):
            problems.append(
                f"decoder_widths needs {self.upsample_stages + 1} entries (bottleneck + stages), "
                f"got {len(self.decoder_widths)}"
            )
        if self.in_channels <= 0 or self.classes <= 0:
            problems.append("in_channels and classes must be positive")
        if not problems:
            multiple = p[0] * 2 ** (self.hierarchies - 1)
            for a, ext in enumerate(window):
                if ext % multiple:
                    problems.append(
                        f"window axis {a} extent {ext} not divisible by patch*2^(hierarchies-1) = {multiple}"
                    )
        if problems:
            raise GeometryError("invalid model geometry: " + "; ".join(problems))


SCALES: dict[str, dict] = {
    "S": dict(depths=(2, 2, 8), heads=(2, 4, 8), widths=(64, 128, 256)),
    "B": dict(depths=(2, 2, 8), heads=(4, 8, 16), widths=(128, 256, 512)),
    "L": dict(depths=(2, 2, 20), heads=(6, 12, 24), widths=(192, 384, 768)),
}

# Reference totals for the standard scales, shown side by side with computed counts only.
REFERENCE_PARAMS = {"S": 22.4e6, "B": 87.3e6, "L": 279.6e6}
REFERENCE_GFLOPS = {"B": 261.7}


def scale_config(scale: str, **overrides) -> ModelConfig:
    key = scale.upper()
    if key not in SCALES:
        raise KeyError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
    return ModelConfig(**{**SCALES[key], **overrides})


def micro_config(**overrides) -> ModelConfig:
    """Desk-scale model used by gradient checks and overfit tests."""
    base = dict(
        patch=(2, 2, 2),
        depths=(1, 1, 1),
        heads=(1, 2, 2),
        widths=(8, 16, 32),
        classes=2,
        window=(16, 16, 16),
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_steps: int = 500
    total_steps: int = 50_000
    batch_size: int = 1
    window: tuple[int, int, int] = (96, 96, 96)
    seed: int = 0
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    foreground_prob: float = 0.5
    augment_prob: float = 0.1

    def validate(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise ValueError("total_steps and batch_size must be positive")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be non-negative")


# ---------------------------------------------------------------------------
# flat key/value files
# ---------------------------------------------------------------------------


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(text: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not text.strip():
            return ()
        return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    if tp is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return tp(text)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def from_mapping(cls, values: dict[str, str], base=None):
    """Build ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: _coerce(v, hints[k]) for k, v in values.items() if k in names}
    base = base if base is not None else cls()
    return dataclasses.replace(base, **kwargs)


def split_config(values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    """Partition keys into (model, train) groups; ``window`` feeds both."""
    mnames = {f.name for f in dataclasses.fields(ModelConfig)}
    tnames = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - mnames - tnames - {"scale"})
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    model = {k: v for k, v in values.items() if k in mnames}
    train = {k: v for k, v in values.items() if k in tnames}
    return model, train


def load_configs(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model_vals, train_vals = split_config(values)
    scale = values.get("scale")
    if scale is None:
        base = ModelConfig()
    elif scale.strip().lower() == "micro":
        base = micro_config()
    else:
        base = scale_config(scale.strip())
    return from_mapping(ModelConfig, model_vals, base), from_mapping(TrainConfig, train_vals)


def dump_kv(*configs) -> str:
    lines = []
    seen = set()
    for cfg in configs:
        for f in dataclasses.fields(cfg):
            if f.name in seen:
                continue
            seen.add(f.name)
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def model_config_from_dict(d: dict) -> ModelConfig:
    hints = typing.get_type_hints(ModelConfig)
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = tuple(v) if typing.get_origin(hints[k]) is tuple else v
    return ModelConfig(**kwargs)

