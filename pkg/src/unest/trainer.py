"""Loss, optimizer, learning-rate schedule, training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import ops
from .config import ModelConfig, TrainConfig, model_config_from_dict, model_config_to_dict
from .model import UNesT, build
from .tensor import Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _one_hot(target: np.ndarray, classes: int, dtype) -> np.ndarray:
    """``(b, *vox)`` labels -> ``(b, K, *vox)`` indicator array."""
    target = np.asarray(target)
    if target.min(initial=0) < 0 or target.max(initial=0) >= classes:
        raise ValueError(f"labels must lie in [0, {classes}), got range [{target.min()}, {target.max()}]")
    eye = np.eye(classes, dtype=dtype)
    return np.moveaxis(eye[target], -1, 1)


def _dice_ce(probs: Tensor, log_probs: Tensor, target: np.ndarray, dice_weight: float, ce_weight: float) -> Tensor:
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != tuple(target.shape[1:]):
        raise ValueError(f"prediction shape {probs.shape} does not match target {target.shape}")
    k = probs.shape[1]
    onehot = Tensor(_one_hot(target, k, probs.dtype), dtype=probs.dtype)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(axis=axes)
    denom = probs.sum(axis=axes) + onehot.sum(axis=axes)
    soft_dice = (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
    dice_term = 1.0 - soft_dice.mean()
    voxels = target.size
    ce = -(log_probs * onehot).sum() * (1.0 / voxels)
    return dice_term * dice_weight + ce * ce_weight


def dice_ce_loss(
    probs: Tensor, target: np.ndarray, dice_weight: float = 1.0, ce_weight: float = 1.0
) -> Tensor:
    """Soft Dice plus cross-entropy on class probabilities ``(b, K, *vox)``.

    ``softDice_k = (2 sum p_k t_k + eps) / (sum p_k + sum t_k + eps)`` with sums
    over batch and voxels; the Dice term is ``1 - mean_k softDice_k``.
    """
    return _dice_ce(probs, probs.log(), target, dice_weight, ce_weight)


def dice_ce_loss_from_logits(
    logits: Tensor, target: np.ndarray, dice_weight: float = 1.0, ce_weight: float = 1.0
) -> Tensor:
    """Same loss, taking logits; the CE term uses a stable log-softmax."""
    return _dice_ce(ops.softmax(logits, 1), ops.log_softmax(logits, 1), target, dice_weight, ce_weight)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.dtype)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _batches(data: Iterable, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    it = iter(data)
    while True:
        images, labels = [], []
        for _ in range(batch_size):
            image, label = next(it)
            images.append(image)
            labels.append(label)
        yield np.stack(images), np.stack(labels)


def train(
    model: UNesT,
    data: Iterable[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps.

    ``data`` yields ``(image (C, H, W, D), label (H, W, D))`` pairs.  The loss
    recorded at index ``t`` is evaluated before update ``t``, which uses
    ``lr_schedule(t + 1)`` so the first update already moves the weights.
    ``stop_after`` truncates the run without changing the schedule.
    """
    cfg.validate()
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    result = TrainResult()
    batches = _batches(data, cfg.batch_size)
    n_steps = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    for step in range(n_steps):
        images, labels = next(batches)
        model.zero_grad()
        logits = model(Tensor(images.astype(model.dtype, copy=False)))
        loss = dice_ce_loss_from_logits(logits, labels, cfg.dice_weight, cfg.ce_weight)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        del logits, loss
        norm = clip_grad_norm(params, cfg.grad_clip)
        lr = lr_schedule(step + 1, cfg)
        opt.step(lr)
        result.losses.append(value)
        result.lrs.append(lr)
        result.grad_norms.append(norm)
        if on_step is not None:
            on_step(step, value, lr)
        log.debug("step %d loss %.6f lr %.3e", step, value, lr)
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt"
            save_checkpoint(model, path, step + 1)
            result.checkpoints.append(path)
    return result


def fold_of(sample_id: str, folds: int = 5) -> int:
    """Stable fold assignment from a CRC32 of the sample id."""
    return zlib.crc32(sample_id.encode("utf-8")) % folds


def split_folds(sample_ids: Iterable[str], fold: int, folds: int = 5) -> tuple[list[str], list[str]]:
    """(train ids, validation ids) for ``fold``."""
    train_ids, val_ids = [], []
    for sid in sample_ids:
        (val_ids if fold_of(sid, folds) == fold else train_ids).append(sid)
    return train_ids, val_ids


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"UNST"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint."""


def save_checkpoint(model: UNesT, path: str | Path, step: int = 0) -> Path:
    """Layout: ``UNST`` | u32 version | u64 manifest length | JSON manifest | payload.

    Payload tensors are little-endian and stored back to back in parameter
    order; the manifest records name, dtype, shape, byte offset and size of
    each, the model config, the step and a CRC32 of the payload.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "config": model_config_to_dict(model.cfg),
        "step": int(step),
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[16 : 16 + mlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = blob[16 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {manifest['payload_bytes']} bytes)"
        )
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return manifest, tensors


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> UNesT:
    """Rebuild the model stored in ``path``.

    With ``config`` given, the checkpoint tensors are validated against a
    model built from that config; any name or shape mismatch raises
    :class:`CheckpointError` listing the offenders.
    """
    manifest, tensors = read_checkpoint(path)
    stored = model_config_from_dict(manifest["config"])
    cfg = config or stored
    dtype = next(iter(tensors.values())).dtype if tensors else None
    model = build(cfg, dtype=dtype)
    try:
        model.load_state_dict(tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: checkpoint does not fit config: {exc}") from exc
    return model


def checkpoint_step(path: str | Path) -> int:
    return int(read_checkpoint(path)[0]["step"])
