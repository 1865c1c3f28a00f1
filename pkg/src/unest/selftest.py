"""Deterministic property suite behind ``unest selftest``.

Every check is seeded, runs in memory (no files are written) and returns a
``(passed, detail)`` pair.  The whole suite takes a few seconds.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from . import ops
from .config import TrainConfig, micro_config, scale_config
from .encoder import blockify, unblockify
from .inference import argmax_labels, ensemble, sliding_window, window_starts
from .metrics import bland_altman, dsc, hausdorff, volumetrics
from .model import build, count_params
from .tensor import Tensor, default_dtype
from .trainer import AdamW, dice_ce_loss, lr_schedule
from .volume_io import Volume, augment, decode_nifti, encode_nifti, intensity_window, resample

Check = Callable[[], tuple[bool, str]]


def _softmax_rows() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7)) * 30
    y = ops.softmax(Tensor(x, dtype=np.float64), -1).data
    shifted = ops.softmax(Tensor(x + 123.0, dtype=np.float64), -1).data
    big = ops.softmax(Tensor(np.array([1000.0, 0.0]), dtype=np.float64), -1).data
    err = float(np.abs(y.sum(-1) - 1).max())
    ok = err < 1e-6 and np.allclose(y, shifted, atol=1e-6) and abs(big[0] - 1) < 1e-12
    return ok, f"max row-sum error {err:.1e}"


def _blockify_roundtrip() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = int(rng.integers(1, 4))
        grid = tuple(int(g * rng.integers(1, 4)) for _ in range(3))
        x = Tensor(rng.normal(size=(2,) + grid + (3,)))
        back = unblockify(blockify(x, g), g, grid).data
        if not np.array_equal(back, x.data):
            return False, f"mismatch at grid {grid}, g={g}"
    return True, "50 random grids"


def _block_counts() -> tuple[bool, str]:
    cfg = scale_config("B")
    layout = [cfg.block_layout(level, (96, 96, 96)) for level in range(3)]
    return layout == [(64, 216), (8, 216), (1, 216)], f"(T, n) per hierarchy {layout}"


def _micro_shapes() -> tuple[bool, str]:
    cfg = micro_config(classes=3)
    model = build(cfg, seed=0)
    out = model.predict_logits(np.zeros((1, 1, 16, 16, 16), np.float32))
    return out.shape == (1, 3, 16, 16, 16), f"micro output {out.shape}, {count_params(model)} params"


def _schedule() -> tuple[bool, str]:
    cfg = TrainConfig(warmup_steps=500, total_steps=2000)
    lrs = [lr_schedule(s, cfg) for s in range(cfg.total_steps + 1)]
    after = lrs[cfg.warmup_steps :]
    ok = lrs[0] == 0 and lrs[500] == cfg.peak_lr and lrs[-1] == 0 and all(a >= b for a, b in zip(after, after[1:]))
    return ok, f"lr(500)={lrs[500]:.1e}"


def _zero_lr_step() -> tuple[bool, str]:
    model = build(micro_config(), seed=0)
    before = [p.data.copy() for p in model.parameters()]
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    AdamW(model.parameters(), weight_decay=0.1).step(0.0)
    ok = all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    return ok, "weights unchanged"


def _loss_values() -> tuple[bool, str]:
    with default_dtype(np.float64):
        target = np.array([[[0, 1, 1, 0]]])
        onehot = np.moveaxis(np.eye(2)[target], -1, 1)
        perfect = float(dice_ce_loss(Tensor(np.clip(onehot, 1e-12, 1)), target).data)
        uniform = Tensor(np.full((1, 2, 1, 4), 0.5))
        ce_only = float(dice_ce_loss(uniform, target, dice_weight=0.0).data)
    ok = perfect < 1e-4 and abs(ce_only - math.log(2)) < 1e-12
    return ok, f"perfect {perfect:.1e}, uniform CE {ce_only:.6f}"


def _window_rule() -> tuple[bool, str]:
    ok = window_starts(120, 96, 0.5) == [0, 24] and window_starts(96, 96, 0.5) == [0]
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = int(rng.integers(1, 20))
        n = int(rng.integers(w, 60))
        ov = float(rng.uniform(0, 0.9))
        starts = window_starts(n, w, ov)
        covered = np.zeros(n, bool)
        for s in starts:
            covered[s : s + w] = True
        ok &= bool(covered.all()) and starts[-1] == n - w
    return ok, "coverage and clamping on 20 geometries"


def _fusion() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 1))

    def mock(batch):
        return np.einsum("kc,bc...->bk...", w, batch)

    image = rng.normal(size=(1, 20, 13, 9))
    probs = sliding_window(mock, image, (8, 8, 8), 0.5)
    err = float(np.abs(probs.sum(0) - 1).max())
    same = ensemble([probs, probs, probs])
    labels = argmax_labels(np.full((3, 2, 2, 2), 1 / 3))
    ok = err < 1e-5 and np.allclose(same, probs, rtol=0, atol=1e-15) and not labels.any()
    return ok, f"row-sum error {err:.1e}"


def _brute_hd(a: np.ndarray, b: np.ndarray) -> float:
    def bnd(m):
        pts = []
        for idx in zip(*np.nonzero(m)):
            for ax, d in itertools.product(range(3), (-1, 1)):
                j = list(idx)
                j[ax] += d
                if not 0 <= j[ax] < m.shape[ax] or not m[tuple(j)]:
                    pts.append(idx)
                    break
        return np.array(pts, float).reshape(-1, 3)

    pa, pb = bnd(a), bnd(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.inf
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(1).max(), d.min(0).max()))


def _metrics() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(20):
        a = (rng.random((5, 5, 5)) < 0.3).astype(int)
        b = (rng.random((5, 5, 5)) < 0.3).astype(int)
        ok &= hausdorff(a, b) == _brute_hd(a == 1, b == 1) and dsc(a, b) == dsc(b, a)
    empty = np.zeros((4, 4, 4), int)
    one = empty.copy()
    one[1, 2, 3] = 1
    ok &= hausdorff(one, empty) == math.inf and hausdorff(empty, empty) == 0.0 and dsc(empty, empty) == 1.0
    v = volumetrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    ba = bland_altman([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
    ok &= v["pearson_r"] == 1.0 and v["abs_dev"] == 0 and ba["mean_diff"] == 1.0 and ba["sd_diff"] == 0
    return ok, "20 random 5^3 pairs against brute force"


def _volume_io() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    ok = True
    for dt in (np.uint8, np.int16, np.int32, np.float32, np.float64, np.uint16):
        vol = Volume(rng.integers(0, 200, size=(4, 3, 5)).astype(dt), (0.5, 1.0, 2.0))
        back = decode_nifti(encode_nifti(vol))
        ok &= back.values.dtype == vol.values.dtype and back.values.tobytes() == vol.values.tobytes()
    hu = Volume(np.array([-1000.0, -175.0, 50.0, 275.0]).reshape(1, 1, 4))
    ok &= np.allclose(intensity_window(hu).values.ravel(), [0, 0, 0.5, 1])
    up = resample(Volume(rng.random((4, 4, 4)), (2.0, 2.0, 2.0)), (1.0, 1.0, 1.0))
    ok &= up.shape == (8, 8, 8)
    image = rng.random((6, 6, 6))
    label = rng.integers(0, 3, (6, 6, 6))
    i1, l1 = augment(image, label, seed=11, p=1.0)
    i2, l2 = augment(image, label, seed=11, p=1.0)
    ok &= np.array_equal(i1, i2) and np.array_equal(l1, l2)
    return ok, "NIfTI roundtrip on 6 dtypes, window, resample, augment"


CHECKS: dict[str, Check] = {
    "softmax rows sum to one": _softmax_rows,
    "blockify roundtrip": _blockify_roundtrip,
    "block counts 64/8/1 at 96^3": _block_counts,
    "micro model output shape": _micro_shapes,
    "warm-up cosine schedule": _schedule,
    "zero learning rate keeps weights": _zero_lr_step,
    "loss reference values": _loss_values,
    "sliding-window start rule": _window_rule,
    "probability fusion": _fusion,
    "metric oracles": _metrics,
    "volume IO and preprocessing": _volume_io,
}


def run(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # report and continue with the remaining checks
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        emit(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
