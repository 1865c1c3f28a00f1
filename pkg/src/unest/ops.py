"""Differentiable neural-network primitives built on :mod:`unest.tensor`.

Volumetric operators take channels-first arrays ``(B, C, H, W, D)``.  The
convolution kernels lower to GEMM on a channels-last im2col buffer, processed
in slabs along the first spatial axis so memory stays bounded at 96^3.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

from .tensor import Function, Tensor

__all__ = [
    "gelu",
    "leaky_relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "instance_norm",
    "conv3d",
    "conv_transpose3d",
    "max_pool3d",
    "conv3d_reference",
]

# bytes allowed for one im2col slab
_SLAB_BYTES = 96 * 2**20


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GELU(Function):
    """Exact GELU, x * Phi(x)."""

    name = "gelu"

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        ctx.save(x=x, cdf=cdf)
        return x * cdf

    @staticmethod
    def backward(ctx, g):
        x = ctx.x
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (ctx.cdf + x * pdf),)


class LeakyReLU(Function):
    name = "leaky_relu"

    @staticmethod
    def forward(ctx, x, slope):
        mask = x > 0
        ctx.save(mask=mask, slope=slope)
        return np.where(mask, x, x * slope)

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx.mask, g, g * ctx.slope),)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g - np.exp(ctx.y) * g.sum(axis=ctx.axis, keepdims=True),)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _normalize_backward(g_hat, xhat, inv, axes):
    n = int(np.prod([xhat.shape[a] for a in axes]))
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv * (g_hat - s1 / n - xhat * (s2 / n))


class LayerNorm(Function):
    name = "layer_norm"

    @staticmethod
    def forward(ctx, x, weight, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat=xhat, inv=inv, weight=weight)
        return xhat * weight + bias

    @staticmethod
    def backward(ctx, g):
        xhat = ctx.xhat
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx = _normalize_backward(g * ctx.weight, xhat, ctx.inv, (g.ndim - 1,))
        return gx, gw, gb


class InstanceNorm(Function):
    name = "instance_norm"

    @staticmethod
    def forward(ctx, x, eps):
        axes = tuple(range(2, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat=xhat, inv=inv, axes=axes)
        return xhat

    @staticmethod
    def backward(ctx, g):
        return (_normalize_backward(g, ctx.xhat, ctx.inv, ctx.axes),)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis with learnable scale and shift."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"layer_norm width mismatch: input {x.shape[-1]}, weight {weight.shape[-1]}")
    return LayerNorm.apply(x, weight, bias, eps=eps)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial axes, no affine."""
    return InstanceNorm.apply(x, eps=eps)


# ---------------------------------------------------------------------------
# convolution kernels (raw arrays)
# ---------------------------------------------------------------------------


def _out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _slab_rows(per_row_bytes: int, rows: int) -> int:
    return max(1, min(rows, _SLAB_BYTES // max(1, per_row_bytes)))


def _offsets(k):
    return list(itertools.product(range(k[0]), range(k[1]), range(k[2])))


def _gather(src, k, s, h0, h1, out_wd, dst):
    """Fill ``dst[..., o, :]`` with the strided source window for each offset."""
    wo, do = out_wd
    for o, (i, j, l) in enumerate(_offsets(k)):
        dst[:, :, :, :, o, :] = src[
            :,
            h0 * s[0] + i : (h1 - 1) * s[0] + i + 1 : s[0],
            j : j + (wo - 1) * s[1] + 1 : s[1],
            l : l + (do - 1) * s[2] + 1 : s[2],
            :,
        ]


def _scatter(dst, k, s, h0, h1, out_wd, src):
    """Adjoint of :func:`_gather`: add ``src[..., o, :]`` back into ``dst``."""
    wo, do = out_wd
    for o, (i, j, l) in enumerate(_offsets(k)):
        dst[
            :,
            h0 * s[0] + i : (h1 - 1) * s[0] + i + 1 : s[0],
            j : j + (wo - 1) * s[1] + 1 : s[1],
            l : l + (do - 1) * s[2] + 1 : s[2],
            :,
        ] += src[:, :, :, :, o, :]


def _pad_cl(x_cf, p):
    """Channels-first -> padded channels-last."""
    xcl = x_cf.transpose(0, 2, 3, 4, 1)
    if any(p):
        xcl = np.pad(xcl, ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]), (0, 0)))
    return xcl


def _conv_forward(x, w, s, p):
    b, cin = x.shape[:2]
    cout = w.shape[0]
    k = w.shape[2:]
    out_sp = tuple(_out_extent(x.shape[2 + a], k[a], s[a], p[a]) for a in range(3))
    if min(out_sp) < 1:
        raise ValueError(f"conv3d output would be empty for input {x.shape[2:]} and kernel {k}")
    xp = _pad_cl(x, p)
    kk = k[0] * k[1] * k[2]
    wmat = w.transpose(2, 3, 4, 1, 0).reshape(kk * cin, cout)
    out = np.empty((b,) + out_sp + (cout,), dtype=x.dtype)
    per_row = b * out_sp[1] * out_sp[2] * kk * cin * x.itemsize
    step = _slab_rows(per_row, out_sp[0])
    for h0 in range(0, out_sp[0], step):
        h1 = min(out_sp[0], h0 + step)
        cols = np.empty((b, h1 - h0, out_sp[1], out_sp[2], kk, cin), dtype=x.dtype)
        _gather(xp, k, s, h0, h1, out_sp[1:], cols)
        out[:, h0:h1] = (cols.reshape(-1, kk * cin) @ wmat).reshape(b, h1 - h0, out_sp[1], out_sp[2], cout)
    return out.transpose(0, 4, 1, 2, 3)


def _conv_backward(g, x, w, s, p, need_x=True):
    b, cin = x.shape[:2]
    cout = w.shape[0]
    k = w.shape[2:]
    kk = k[0] * k[1] * k[2]
    out_sp = g.shape[2:]
    xp = _pad_cl(x, p)
    gcl = g.transpose(0, 2, 3, 4, 1)
    wmat = w.transpose(2, 3, 4, 1, 0).reshape(kk * cin, cout)
    gw = np.zeros((kk * cin, cout), dtype=x.dtype)
    gxp = np.zeros(xp.shape, dtype=x.dtype) if need_x else None
    per_row = b * out_sp[1] * out_sp[2] * kk * cin * x.itemsize
    step = _slab_rows(per_row, out_sp[0])
    for h0 in range(0, out_sp[0], step):
        h1 = min(out_sp[0], h0 + step)
        cols = np.empty((b, h1 - h0, out_sp[1], out_sp[2], kk, cin), dtype=x.dtype)
        _gather(xp, k, s, h0, h1, out_sp[1:], cols)
        gslab = gcl[:, h0:h1].reshape(-1, cout)
        gw += cols.reshape(-1, kk * cin).T @ gslab
        if need_x:
            gcols = (gslab @ wmat.T).reshape(cols.shape)
            _scatter(gxp, k, s, h0, h1, out_sp[1:], gcols)
    gw = gw.reshape(k + (cin, cout)).transpose(4, 3, 0, 1, 2)
    gx = None
    if need_x:
        gx = gxp[:, p[0] : p[0] + x.shape[2], p[1] : p[1] + x.shape[3], p[2] : p[2] + x.shape[4], :]
        gx = gx.transpose(0, 4, 1, 2, 3)
    return gx, gw


def _convt_forward(x, w, s, p):
    """Transposed convolution: scatter each input voxel's kernel response."""
    b, cin = x.shape[:2]
    cout = w.shape[1]
    k = w.shape[2:]
    kk = k[0] * k[1] * k[2]
    in_sp = x.shape[2:]
    full = tuple((in_sp[a] - 1) * s[a] + k[a] for a in range(3))
    out = np.zeros((b,) + full + (cout,), dtype=x.dtype)
    wmat = w.transpose(0, 2, 3, 4, 1).reshape(cin, kk * cout)
    xcl = x.transpose(0, 2, 3, 4, 1)
    per_row = b * in_sp[1] * in_sp[2] * kk * cout * x.itemsize
    step = _slab_rows(per_row, in_sp[0])
    for h0 in range(0, in_sp[0], step):
        h1 = min(in_sp[0], h0 + step)
        cols = (xcl[:, h0:h1].reshape(-1, cin) @ wmat).reshape(b, h1 - h0, in_sp[1], in_sp[2], kk, cout)
        _scatter(out, k, s, h0, h1, in_sp[1:], cols)
    out = out[:, p[0] : full[0] - p[0], p[1] : full[1] - p[1], p[2] : full[2] - p[2], :]
    return out.transpose(0, 4, 1, 2, 3)


def _convt_backward(g, x, w, s, p):
    b, cin = x.shape[:2]
    cout = w.shape[1]
    k = w.shape[2:]
    kk = k[0] * k[1] * k[2]
    in_sp = x.shape[2:]
    gp = _pad_cl(g, p)
    wmat = w.transpose(0, 2, 3, 4, 1).reshape(cin, kk * cout)
    xcl = x.transpose(0, 2, 3, 4, 1)
    gx = np.empty((b,) + in_sp + (cin,), dtype=x.dtype)
    gw = np.zeros((cin, kk * cout), dtype=x.dtype)
    per_row = b * in_sp[1] * in_sp[2] * kk * cout * x.itemsize
    step = _slab_rows(per_row, in_sp[0])
    for h0 in range(0, in_sp[0], step):
        h1 = min(in_sp[0], h0 + step)
        cols = np.empty((b, h1 - h0, in_sp[1], in_sp[2], kk, cout), dtype=x.dtype)
        _gather(gp, k, s, h0, h1, in_sp[1:], cols)
        cols = cols.reshape(-1, kk * cout)
        gx[:, h0:h1] = (cols @ wmat.T).reshape(b, h1 - h0, in_sp[1], in_sp[2], cin)
        gw += xcl[:, h0:h1].reshape(-1, cin).T @ cols
    gw = gw.reshape((cin,) + k + (cout,)).transpose(0, 4, 1, 2, 3)
    return gx.transpose(0, 4, 1, 2, 3), gw


class Conv3d(Function):
    name = "conv3d"

    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        if x.ndim != 5 or w.ndim != 5:
            raise ValueError("conv3d expects 5-D input and weight")
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
        ctx.save(x=x, w=w, s=stride, p=padding)
        out = _conv_forward(x, w, stride, padding)
        if b is not None and b.size:
            out = out + b.reshape(1, -1, 1, 1, 1)
        return out

    @staticmethod
    def backward(ctx, g):
        gx, gw = _conv_backward(g, ctx.x, ctx.w, ctx.s, ctx.p)
        gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb


class ConvTranspose3d(Function):
    name = "conv_transpose3d"

    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        if x.shape[1] != w.shape[0]:
            raise ValueError(
                f"conv_transpose3d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[0]}"
            )
        ctx.save(x=x, w=w, s=stride, p=padding)
        out = _convt_forward(x, w, stride, padding)
        if b is not None and b.size:
            out = out + b.reshape(1, -1, 1, 1, 1)
        return out

    @staticmethod
    def backward(ctx, g):
        gx, gw = _convt_backward(g, ctx.x, ctx.w, ctx.s, ctx.p)
        return gx, gw, g.sum(axis=(0, 2, 3, 4))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation; ``weight`` is ``(C_out, C_in, kh, kw, kd)``."""
    bias = bias if bias is not None else Tensor(np.zeros(0, dtype=weight.dtype))
    return Conv3d.apply(x, weight, bias, stride=_triple(stride), padding=_triple(padding))


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d`; ``weight`` is ``(C_in, C_out, kh, kw, kd)``."""
    bias = bias if bias is not None else Tensor(np.zeros(0, dtype=weight.dtype))
    return ConvTranspose3d.apply(x, weight, bias, stride=_triple(stride), padding=_triple(padding))


class MaxPool3d(Function):
    name = "max_pool3d"

    @staticmethod
    def forward(ctx, x, kernel, stride):
        out_sp = tuple(_out_extent(x.shape[2 + a], kernel[a], stride[a], 0) for a in range(3))
        if min(out_sp) < 1:
            raise ValueError(f"max_pool3d kernel {kernel} larger than input {x.shape[2:]}")
        out = None
        arg = np.zeros(x.shape[:2] + out_sp, dtype=np.int16)
        for o, (i, j, l) in enumerate(_offsets(kernel)):
            view = x[
                :,
                :,
                i : i + (out_sp[0] - 1) * stride[0] + 1 : stride[0],
                j : j + (out_sp[1] - 1) * stride[1] + 1 : stride[1],
                l : l + (out_sp[2] - 1) * stride[2] + 1 : stride[2],
            ]
            if out is None:
                out = view.copy()
                continue
            # strict '>' keeps the first maximal offset on ties
            better = view > out
            np.copyto(out, view, where=better)
            np.copyto(arg, o, where=better)
        ctx.save(arg=arg, shape=x.shape, dtype=x.dtype, k=kernel, s=stride)
        return out

    @staticmethod
    def backward(ctx, g):
        gx = np.zeros(ctx.shape, dtype=ctx.dtype)
        out_sp = g.shape[2:]
        s = ctx.s
        for o, (i, j, l) in enumerate(_offsets(ctx.k)):
            gx[
                :,
                :,
                i : i + (out_sp[0] - 1) * s[0] + 1 : s[0],
                j : j + (out_sp[1] - 1) * s[1] + 1 : s[1],
                l : l + (out_sp[2] - 1) * s[2] + 1 : s[2],
            ] += np.where(ctx.arg == o, g, 0)
        return (gx,)


def max_pool3d(x: Tensor, kernel=2, stride=None) -> Tensor:
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    return MaxPool3d.apply(x, kernel=kernel, stride=stride)


def conv3d_reference(x: np.ndarray, w: np.ndarray, b=None, stride=1, padding=0) -> np.ndarray:
    """Naive direct convolution used as an oracle for :func:`conv3d`."""
    s, p = _triple(stride), _triple(padding)
    k = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    out_sp = tuple(_out_extent(x.shape[2 + a], k[a], s[a], p[a]) for a in range(3))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp, dtype=np.float64)
    for n in range(x.shape[0]):
        for co in range(w.shape[0]):
            for oh in range(out_sp[0]):
                for ow in range(out_sp[1]):
                    for od in range(out_sp[2]):
                        patch = xp[
                            n,
                            :,
                            oh * s[0] : oh * s[0] + k[0],
                            ow * s[1] : ow * s[1] + k[1],
                            od * s[2] : od * s[2] + k[2],
                        ]
                        out[n, co, oh, ow, od] = float(np.sum(patch * w[co]))
            if b is not None:
                out[n, co] += b[co]
    return out

