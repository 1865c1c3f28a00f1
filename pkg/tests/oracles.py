"""Independent reference computations used by the tests.

Nothing here imports the model code: parameter counts come from closed-form
layer formulas, metrics from brute-force loops.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def layer_params(c: int, mlp_ratio: int) -> int:
    norms = 2 * 2 * c
    qkv = c * 3 * c + 3 * c
    proj = c * c + c
    mlp = c * mlp_ratio * c + mlp_ratio * c + mlp_ratio * c * c + c
    return norms + qkv + proj + mlp


def residual_params(cin: int, cout: int) -> int:
    return 27 * cin * cout + 27 * cout * cout + (cin * cout if cin != cout else 0)


def hand_count(
    *,
    in_channels: int,
    classes: int,
    patch: int,
    depths,
    widths,
    window: int,
    mlp_ratio: int = 4,
    decoder_widths=None,
    aggregation: bool = True,
) -> int:
    """Parameter total of the encoder/decoder for a cubic window, by formula."""
    n_h = len(depths)
    total = in_channels * patch**3 * widths[0] + widths[0]
    tokens_per_axis = window // patch
    for level, (depth, c) in enumerate(zip(depths, widths)):
        g = 2 ** (n_h - 1 - level) if aggregation else 1
        extent = tokens_per_axis // 2**level
        T, n = g**3, (extent // g) ** 3
        total += T * n * c
        total += depth * layer_params(c, mlp_ratio)
        if level < n_h - 1:
            total += 27 * c * widths[level + 1] + widths[level + 1]
    total += 2 * widths[-1]

    stages = n_h - 1 + int(math.log2(patch))
    dec = list(decoder_widths) if decoder_widths else list(reversed(widths))
    while len(dec) < stages + 1:
        dec.append(dec[-1] // 2)
    total += 27 * widths[-1] * dec[0] + dec[0]
    for s in range(stages):
        cin, cout = dec[s], dec[s + 1]
        total += 8 * cin * cout + cout
        total += residual_params(2 * cout, cout)
        if s < n_h - 1:
            total += residual_params(widths[n_h - 2 - s], cout)
        else:
            image_level = stages - 1 - s
            if image_level:
                total += 27 * in_channels * cout + cout + residual_params(cout, cout)
            else:
                total += residual_params(in_channels, cout)
    total += dec[-1] * classes + classes
    return total


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour outside the mask or outside the grid."""
    pts = []
    for idx in zip(*np.nonzero(mask)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            j = list(idx)
            j[axis] += step
            if not 0 <= j[axis] < mask.shape[axis] or not mask[tuple(j)]:
                pts.append(idx)
                break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def brute_hausdorff(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    pa = boundary_points(a) * np.asarray(spacing, np.float64)
    pb = boundary_points(b) * np.asarray(spacing, np.float64)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.inf
    d = np.sqrt(np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def brute_dsc(a: np.ndarray, b: np.ndarray) -> float:
    inter = sa = sb = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        sa += x
        sb += y
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def enumerate_starts(extent: int, window: int, overlap: float) -> list[int]:
    """Window starts by stepping one voxel at a time and recording every multiple of the stride."""
    stride = max(1, int(math.floor(window * (1 - overlap) + 0.5)))
    starts = []
    for p in range(extent):
        if p % stride == 0 and p + window <= extent:
            starts.append(p)
    if not starts or starts[-1] != extent - window:
        starts.append(extent - window)
    return starts
