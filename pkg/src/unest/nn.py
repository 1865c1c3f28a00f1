"""Parameter containers and basic layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds parameters (``Tensor`` leaves with ``requires_grad``) and submodules.

    Parameters are discovered by walking instance attributes in definition
    order, which fixes the parameter ordering used by checkpoints and the
    optimizer.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        problems = []
        for name in own:
            if name not in state:
                problems.append(f"missing {name}")
            elif tuple(state[name].shape) != own[name].shape:
                problems.append(f"{name}: checkpoint {tuple(state[name].shape)} vs model {own[name].shape}")
        problems += [f"unexpected {name}" for name in state if name not in own]
        if problems:
            raise ValueError("state mismatch: " + "; ".join(problems))
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = x.reshape(-1, x.shape[-1]) @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.weight.shape[1])


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        fan_in = in_channels * kernel**3
        self.weight = parameter(he_uniform(rng, (out_channels, in_channels, kernel, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        fan_in = in_channels * kernel**3
        self.weight = parameter(he_uniform(rng, (in_channels, out_channels, kernel, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose3d(x, self.weight, self.bias, self.stride)


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Conv3d",
    "ConvTranspose3d",
    "count_parameters",
    "trunc_normal",
    "he_uniform",
]
