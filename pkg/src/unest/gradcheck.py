"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, concat, default_dtype


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, coords, h: float) -> np.ndarray:
    out = np.empty(len(coords))
    flat = x.data.reshape(-1)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = float(fn().data)
        flat[c] = orig - h
        fm = float(fn().data)
        flat[c] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite output while perturbing coordinate {c}")
        out[i] = (fp - fm) / (2 * h)
    return out


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  With
    ``max_coords`` set, each input is probed at that many random coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite output")
    backward(out, inputs)
    worst = 0.0
    for x in inputs:
        analytic = x.grad.reshape(-1).copy()
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        else:
            coords = np.arange(x.size)
        numeric = numerical_grad(lambda: fn(*inputs), x, coords, h)
        a = analytic[coords]
        err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * Tensor(w)).sum()


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One small scalar program per primitive, in float64."""

    def t(*shape, scale=1.0, positive=False):
        a = rng.normal(size=shape) * scale
        if positive:
            a = np.abs(a) + 0.5
        return Tensor(a, requires_grad=True, dtype=np.float64)

    def w(shape):
        return rng.normal(size=shape)

    cases = {}
    a, b = t(3, 4), t(3, 4)
    wa = w((3, 4))
    cases["add"] = (lambda a, b: _weighted_sum(a + b, wa), [a, b])
    a, b = t(3, 4), t(4)
    cases["mul"] = (lambda a, b: _weighted_sum(a * b, wa), [a, b])
    a, b = t(3, 4), t(3, 4, positive=True)
    cases["div"] = (lambda a, b: _weighted_sum(a / b, wa), [a, b])
    a, b = t(2, 3, 4), t(4, 5)
    wm = w((2, 3, 5))
    cases["matmul"] = (lambda a, b: _weighted_sum(a @ b, wm), [a, b])
    a = t(2, 3, 4)
    wp = w((4, 2, 3))
    cases["reshape_permute"] = (lambda a: _weighted_sum(a.reshape(6, 4).reshape(2, 3, 4).permute(2, 0, 1), wp), [a])
    ws = w((2, 2, 4))
    cases["slice"] = (lambda a: _weighted_sum(a[:, 1:3], ws), [a])
    a, b = t(2, 3), t(2, 2)
    wc = w((2, 5))
    cases["concat"] = (lambda a, b: _weighted_sum(concat([a, b], 1), wc), [a, b])
    a = t(3, 4)
    w4 = Tensor(w(4))
    cases["sum_mean"] = (lambda a: (a.sum(axis=0) * w4).sum() + a.mean() * 3.0, [a])
    a = t(3, 4, positive=True)
    cases["exp_log"] = (lambda a: _weighted_sum(a.log() + (a * 0.3).exp(), wa), [a])
    a = t(2, 6, scale=2.0)
    w6 = w((2, 6))
    cases["gelu"] = (lambda a: _weighted_sum(ops.gelu(a), w6), [a])
    cases["leaky_relu"] = (lambda a: _weighted_sum(ops.leaky_relu(a, 0.01), w6), [a])
    cases["softmax"] = (lambda a: _weighted_sum(ops.softmax(a, -1), w6), [a])
    cases["log_softmax"] = (lambda a: _weighted_sum(ops.log_softmax(a, 0), w6), [a])
    x, g, bb = t(16), t(16), t(16)
    w16 = w(16)
    cases["layer_norm"] = (lambda x, g, bb: _weighted_sum(ops.layer_norm(x, g, bb), w16), [x, g, bb])
    x = t(2, 3, 3, 2, 4)
    wi = w((2, 3, 3, 2, 4))
    cases["instance_norm"] = (lambda x: _weighted_sum(ops.instance_norm(x), wi), [x])
    x, k, bc = t(1, 2, 4, 5, 3), t(3, 2, 3, 3, 3, scale=0.5), t(3)
    wconv = w((1, 3, 4, 5, 3))
    cases["conv3d"] = (lambda x, k, bc: _weighted_sum(ops.conv3d(x, k, bc, 1, 1), wconv), [x, k, bc])
    x2, k2 = t(1, 2, 5, 4, 4), t(3, 2, 3, 3, 3, scale=0.5)
    wconv2 = w((1, 3, 3, 2, 2))
    cases["conv3d_stride2"] = (lambda x, k: _weighted_sum(ops.conv3d(x, k, None, 2, 1), wconv2), [x2, k2])
    x, k, bt = t(1, 3, 2, 3, 2), t(3, 2, 2, 2, 2), t(2)
    wt = w((1, 2, 4, 6, 4))
    cases["conv_transpose3d"] = (lambda x, k, bt: _weighted_sum(ops.conv_transpose3d(x, k, bt, 2), wt), [x, k, bt])
    x = t(1, 2, 4, 4, 6)
    wmp = w((1, 2, 2, 2, 3))
    cases["max_pool3d"] = (lambda x: _weighted_sum(ops.max_pool3d(x, 2), wmp), [x])
    return cases


def micro_model_case(seed: int = 0, window=(8, 8, 8), classes: int = 2):
    """Scalar program over the full micro model (64-bit) and its parameter list."""
    from .config import micro_config
    from .model import build

    cfg = micro_config(window=window, classes=classes)
    rng = np.random.default_rng(seed)
    model = build(cfg, seed=seed, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, cfg.in_channels) + tuple(window)), dtype=np.float64)
    wts = rng.normal(size=(1, classes) + tuple(window))

    def fn(*_params):
        return _weighted_sum(model(x), wts)

    return model, fn, model.parameters()


# Composed programs use a smaller step: instance norm concentrates many
# pre-activations near the leaky-ReLU kink, and a 1e-5 stencil straddles it.
MODEL_STEP = 1e-6


def run_suite(max_model_coords: int = 6, seed: int = 0) -> list[tuple[str, float, float]]:
    """Returns ``(name, max_rel_err, tolerance)`` rows for every primitive and the micro model."""
    rows = []
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        for name, (fn, inputs) in primitive_cases(rng).items():
            rows.append((name, grad_check(fn, inputs, h=1e-5), 1e-4))
        _, fn, params = micro_model_case(seed)
        err = grad_check(fn, params, h=MODEL_STEP, max_coords=max_model_coords, rng=rng)
        rows.append(("micro_model", err, 1e-3))
    return rows
