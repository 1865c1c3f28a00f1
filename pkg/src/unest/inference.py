"""Sliding-window inference, probability ensembling and label extraction."""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .volume_io import LABEL, Volume, pad_to

DEFAULT_OVERLAP = 0.5


def window_starts(extent: int, window: int, overlap: float = DEFAULT_OVERLAP) -> list[int]:
    """Start offsets ``0, s, 2s, ...`` with the last clamped to ``extent - window``.

    ``s = round(window * (1 - overlap))`` (half-up, at least 1).
    """
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if window > extent:
        raise ValueError(f"window {window} larger than extent {extent}")
    step = max(1, int(math.floor(window * (1.0 - overlap) + 0.5)))
    last = extent - window
    starts = list(range(0, last, step))
    starts.append(last)
    return starts


def tile_origins(shape, window, overlap: float = DEFAULT_OVERLAP) -> list[tuple[int, int, int]]:
    """Every window origin in raster order (last axis fastest)."""
    per_axis = [window_starts(n, w, overlap) for n, w in zip(shape, window)]
    return list(itertools.product(*per_axis))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _as_predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_logits"):
        return model.predict_logits
    if callable(model):
        return model
    raise TypeError(f"expected a model or a callable returning logits, got {type(model).__name__}")


def sliding_window(
    model,
    image: np.ndarray,
    window: Sequence[int],
    overlap: float = DEFAULT_OVERLAP,
    batch_size: int = 1,
) -> np.ndarray:
    """Fused class probabilities ``(K, H, W, D)`` for an image ``(C, H, W, D)``.

    ``model`` is a :class:`~unest.model.UNesT` or any callable mapping a batch
    ``(b, C, *window)`` to logits ``(b, K, *window)``.  Axes shorter than the
    window are edge-padded symmetrically and cropped back afterwards.  Each
    voxel receives the plain mean of the softmax outputs of all windows
    covering it, accumulated in raster order.
    """
    predict = _as_predictor(model)
    image = np.asarray(image)
    if image.ndim != 4:
        raise ValueError(f"image must be (C, H, W, D), got shape {image.shape}")
    window = tuple(int(w) for w in window)
    if len(window) != 3:
        raise ValueError(f"window must have three extents, got {window}")
    orig = image.shape[1:]
    padded = pad_to(image, window, "edge")
    shape = padded.shape[1:]
    origins = tile_origins(shape, window, overlap)

    acc = None
    counts = np.zeros(shape, np.float64)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i : i + batch_size]
        batch = np.stack(
            [padded[:, a : a + window[0], b : b + window[1], c : c + window[2]] for a, b, c in chunk]
        )
        logits = np.asarray(predict(batch))
        if logits.shape[0] != len(chunk) or logits.shape[2:] != window:
            raise ValueError(f"model returned {logits.shape} for a batch of {batch.shape}")
        probs = softmax(logits.astype(np.float64), axis=1)
        if acc is None:
            acc = np.zeros((logits.shape[1],) + shape, np.float64)
        for (a, b, c), p in zip(chunk, probs):
            sl = (slice(a, a + window[0]), slice(b, b + window[1]), slice(c, c + window[2]))
            acc[(slice(None),) + sl] += p
            counts[sl] += 1.0
    acc /= counts
    crop = tuple(slice((s - o) // 2, (s - o) // 2 + o) for s, o in zip(shape, orig))
    return np.ascontiguousarray(acc[(slice(None),) + crop])


def ensemble(prob_maps: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise arithmetic mean of ``M`` probability maps, in the given order.

    Uses the running update ``m += (p - m) / k``, which leaves ``m`` untouched
    when the maps agree, so averaging identical maps returns them bitwise.
    """
    if len(prob_maps) == 0:
        raise ValueError("ensemble needs at least one probability map")
    shape = np.shape(prob_maps[0])
    mean = np.zeros(shape, np.float64)
    for k, p in enumerate(prob_maps, start=1):
        if np.shape(p) != shape:
            raise ValueError(f"probability map {k - 1} has shape {np.shape(p)}, expected {shape}")
        mean += (p - mean) / k
    return mean


def label_dtype(classes: int) -> np.dtype:
    return np.dtype(np.uint8) if classes <= 256 else np.dtype(np.uint16)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-voxel class of highest probability; ties go to the lowest class index."""
    probs = np.asarray(probs)
    # np.argmax returns the first maximal index
    return np.argmax(probs, axis=0).astype(label_dtype(probs.shape[0]))


def label_volume(probs: np.ndarray, like: Volume | None = None) -> Volume:
    """Label :class:`Volume` from a probability map, inheriting geometry from ``like``."""
    labels = argmax_labels(probs)
    if like is None:
        return Volume(labels, kind=LABEL)
    return Volume(labels, like.spacing, LABEL, like.origin)
