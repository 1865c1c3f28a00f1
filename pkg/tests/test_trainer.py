import itertools
import math

import numpy as np
import pytest

from unest.config import TrainConfig, micro_config, scale_config
from unest.gradcheck import grad_check
from unest.model import build
from unest.tensor import Tensor, default_dtype
from unest.trainer import (
    AdamW,
    CheckpointError,
    TrainingDiverged,
    checkpoint_step,
    clip_grad_norm,
    dice_ce_loss,
    dice_ce_loss_from_logits,
    fold_of,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    split_folds,
    train,
)
from unest.volume_io import synthetic_shapes


def f64(a):
    return Tensor(np.asarray(a, np.float64), dtype=np.float64)


class TestLoss:
    def test_perfect_prediction(self):
        target = np.array([[[0, 1, 1, 2]]])
        probs = np.moveaxis(np.eye(3)[target], -1, 1)
        assert float(dice_ce_loss(f64(np.clip(probs, 1e-12, 1)), target).data) < 1e-4

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_uniform_ce_is_log_k(self, k):
        target = np.arange(10).reshape(1, 10) % k
        probs = f64(np.full((1, k, 10), 1.0 / k))
        assert float(dice_ce_loss(probs, target, dice_weight=0.0).data) == pytest.approx(math.log(k))

    def test_two_voxel_hand_case(self):
        # voxel 0 is class 0 predicted (0.8, 0.2); voxel 1 is class 1 predicted (0.4, 0.6)
        p = np.array([[[0.8, 0.4], [0.2, 0.6]]])
        t = np.array([[0, 1]])
        eps = 1e-5
        dice0 = (2 * 0.8 + eps) / (1.2 + 1 + eps)
        dice1 = (2 * 0.6 + eps) / (0.8 + 1 + eps)
        ce = -(math.log(0.8) + math.log(0.6)) / 2
        want = 1 - (dice0 + dice1) / 2 + ce
        assert float(dice_ce_loss(f64(p), t).data) == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dice_ce_loss(f64(np.full((1, 2, 4), 0.5)), np.zeros((1, 5), int))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        with default_dtype(np.float64):
            logits = Tensor(rng.normal(size=(2, 3, 2, 3, 2)), requires_grad=True)
            target = rng.integers(0, 3, size=(2, 2, 3, 2))
            assert grad_check(lambda x: dice_ce_loss_from_logits(x, target), [logits]) < 1e-3

    def test_logit_and_probability_forms_agree(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(1, 3, 4, 4, 4))
        t = rng.integers(0, 3, size=(1, 4, 4, 4))
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        a = float(dice_ce_loss_from_logits(f64(z), t).data)
        b = float(dice_ce_loss(f64(p), t).data)
        assert a == pytest.approx(b, rel=1e-12)


class TestSchedule:
    def test_endpoints_and_peak(self):
        cfg = TrainConfig(peak_lr=1e-4, warmup_steps=500, total_steps=5000)
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(500, cfg) == 1e-4
        assert lr_schedule(5000, cfg) == 0.0

    def test_monotone_after_warmup(self):
        cfg = TrainConfig(peak_lr=3e-4, warmup_steps=20, total_steps=300)
        lrs = [lr_schedule(s, cfg) for s in range(cfg.warmup_steps, cfg.total_steps + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_warmup_is_linear(self):
        cfg = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=20)
        assert [lr_schedule(s, cfg) for s in range(0, 11, 5)] == [0.0, 0.5, 1.0]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(11, TrainConfig(warmup_steps=1, total_steps=10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=20, total_steps=10).validate()


class TestOptimizer:
    def test_zero_lr_leaves_weights_bitwise(self):
        model = build(micro_config(), seed=0)
        before = [p.data.copy() for p in model.parameters()]
        for p in model.parameters():
            p.grad = np.full_like(p.data, 0.3)
        AdamW(model.parameters(), weight_decay=1e-2).step(0.0)
        assert all(np.array_equal(b, p.data) for b, p in zip(before, model.parameters()))

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.5, -4.0])
        AdamW([p], weight_decay=0.0).step(0.1)
        # bias-corrected first Adam step is lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.0])
        AdamW([p], weight_decay=0.5).step(0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


def _short_run(seed=0, steps=4, checkpoint_dir=None, every=0):
    cfg = micro_config(classes=3)
    image, label = synthetic_shapes(16)
    tc = TrainConfig(
        peak_lr=1e-3, warmup_steps=2, total_steps=steps, window=(16, 16, 16), seed=seed, checkpoint_every=every
    )
    model = build(cfg, seed=seed)
    return model, train(model, itertools.repeat((image, label)), tc, checkpoint_dir=checkpoint_dir), tc


class TestTrainLoop:
    def test_lr_trace_follows_schedule(self):
        _, result, tc = _short_run()
        assert result.lrs == [lr_schedule(s + 1, tc) for s in range(tc.total_steps)]

    def test_deterministic(self, tmp_path):
        m1, r1, _ = _short_run(checkpoint_dir=tmp_path / "a", every=2)
        m2, r2, _ = _short_run(checkpoint_dir=tmp_path / "b", every=2)
        assert r1.losses == r2.losses
        assert [p.name for p in r1.checkpoints] == ["step_000002.ckpt", "step_000004.ckpt"]
        for a, b in zip(r1.checkpoints, r2.checkpoints):
            assert a.read_bytes() == b.read_bytes()

    def test_non_finite_loss_aborts(self):
        model = build(micro_config(), seed=0)
        bad = np.full((1, 16, 16, 16), np.nan, np.float32)
        tc = TrainConfig(warmup_steps=0, total_steps=3, window=(16, 16, 16))
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(model, itertools.repeat((bad, np.zeros((16, 16, 16), int))), tc)

    def test_stop_after(self):
        model = build(micro_config(classes=3), seed=0)
        image, label = synthetic_shapes(16)
        tc = TrainConfig(warmup_steps=5, total_steps=50, window=(16, 16, 16))
        assert len(train(model, itertools.repeat((image, label)), tc, stop_after=2).losses) == 2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build(micro_config(), seed=1)
        path = save_checkpoint(model, tmp_path / "m.ckpt", step=7)
        back = load_checkpoint(path)
        assert checkpoint_step(path) == 7 and back.cfg == model.cfg
        for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
            assert n1 == n2 and a.data.tobytes() == b.data.tobytes()

    def test_magic_and_layout(self, tmp_path):
        path = save_checkpoint(build(micro_config()), tmp_path / "m.ckpt")
        assert path.read_bytes()[:4] == b"UNST"

    def test_truncated(self, tmp_path):
        path = save_checkpoint(build(micro_config()), tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupted_payload(self, tmp_path):
        path = save_checkpoint(build(micro_config()), tmp_path / "m.ckpt")
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_shape_guard_lists_offenders(self, tmp_path):
        path = save_checkpoint(build(micro_config()), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="encoder.patch_embed.proj.weight"):
            load_checkpoint(path, micro_config(widths=(16, 16, 32)))

    @pytest.mark.slow
    def test_scale_s_rejected_by_scale_b(self, tmp_path):
        path = save_checkpoint(build(scale_config("S")), tmp_path / "s.ckpt")
        with pytest.raises(CheckpointError, match="does not fit"):
            load_checkpoint(path, scale_config("B"))


class TestFolds:
    def test_stable_and_balanced(self):
        ids = [f"case{i:03d}" for i in range(500)]
        folds = [fold_of(s) for s in ids]
        assert folds == [fold_of(s) for s in ids]
        counts = np.bincount(folds, minlength=5)
        assert counts.min() > 70

    def test_split_partitions(self):
        ids = [f"s{i}" for i in range(40)]
        tr, va = split_folds(ids, 2)
        assert sorted(tr + va) == sorted(ids) and not set(tr) & set(va)
