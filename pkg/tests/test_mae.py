"""Masked-autoencoder contracts: mask sampling, the masked-only loss, and
the training loop's accumulation/determinism behavior."""

import numpy as np
import pytest

from cubevit import tensor as T
from cubevit import vit3d
from cubevit.errors import UsageError
from cubevit.mae import (
    MAEConfig,
    MaskPlan,
    PretrainConfig,
    encode_visible,
    init_mae_params,
    mae_forward,
    masked_mse,
    patch_targets,
    pretrain,
    sample_mask,
)
from cubevit.optim import ScheduleConfig


def tiny_cfg(volume=(6, 16, 16), cube=(3, 8, 8), dim=16, dec_dim=8):
    return MAEConfig(
        spec=vit3d.CubeSpec(volume=volume, cube=cube),
        encoder=vit3d.ViTConfig(depth=1, heads=2, dim=dim, tile=4),
        decoder=vit3d.ViTConfig(depth=1, heads=2, dim=dec_dim, role="decoder", tile=4),
        mask_ratio=0.5,
    )


class TestSampleMask:
    def test_spectralis_counts(self):
        plan = sample_mask(5120, 0.9, 0)
        assert plan.visible.size == 512
        assert plan.masked.size == 4608

    def test_zero_ratio_all_visible(self):
        plan = sample_mask(16, 0.0, 0)
        assert plan.visible.size == 16 and plan.masked.size == 0

    def test_ratio_one_rejected(self):
        with pytest.raises(UsageError):
            sample_mask(16, 1.0, 0)

    def test_partition_is_exact(self):
        plan = sample_mask(97, 0.73, 5)
        merged = np.sort(np.concatenate([plan.visible, plan.masked]))
        np.testing.assert_array_equal(merged, np.arange(97))

    def test_same_seed_identical(self):
        a, b = sample_mask(64, 0.9, 11), sample_mask(64, 0.9, 11)
        np.testing.assert_array_equal(a.visible, b.visible)

    def test_different_seeds_differ(self):
        a, b = sample_mask(64, 0.9, 1), sample_mask(64, 0.9, 2)
        assert not np.array_equal(a.visible, b.visible)

    def test_masked_frequency_is_uniform(self):
        L, draws = 20, 10000
        counts = np.zeros(L)
        for seed in range(draws):
            counts[sample_mask(L, 0.9, seed).masked] += 1
        freq = counts / draws
        assert np.all(np.abs(freq - 0.9) <= 0.02)


class TestMaskedLoss:
    def test_perfect_reconstruction_is_zero(self):
        target = np.arange(12.0).reshape(4, 3)
        plan = MaskPlan(visible=np.array([0, 2]), masked=np.array([1, 3]), ratio=0.5)
        loss = masked_mse(T.Tensor(target.copy()), target, plan)
        assert float(loss.data) == 0.0

    def test_hand_case_two_single_voxel_cubes(self):
        # Two masked single-voxel cubes, predictions [1, 3] vs targets
        # [0, 0]: loss (1 + 9) / 2 = 5.
        recon = T.Tensor(np.array([[1.0], [3.0]]))
        target = np.zeros((2, 1))
        plan = MaskPlan(visible=np.array([], dtype=np.int64), masked=np.array([0, 1]), ratio=0.9)
        assert float(masked_mse(recon, target, plan).data) == 5.0

    def test_visible_perturbation_leaves_loss_unchanged(self):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg()
        params = init_mae_params(cfg, rng)
        volume = rng.uniform(size=cfg.spec.volume)
        plan = sample_mask(vit3d.sequence_length(cfg.spec), cfg.mask_ratio, 3)
        recon, loss = mae_forward(volume, plan, cfg, params)
        perturbed = recon.data.copy()
        perturbed[plan.visible] += rng.normal(size=(plan.visible.size, cfg.spec.cube_voxels))
        reloss = masked_mse(T.Tensor(perturbed), patch_targets(volume, cfg.spec), plan)
        assert float(reloss.data) == float(loss.data)

    def test_encoder_never_sees_masked_voxels(self):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg()
        params = init_mae_params(cfg, rng)
        volume = rng.uniform(size=cfg.spec.volume)
        plan = sample_mask(vit3d.sequence_length(cfg.spec), cfg.mask_ratio, 7)
        base = encode_visible(volume, plan, cfg, params).data

        tampered = vit3d.patchify(volume, cfg.spec)
        tampered[plan.masked] = 123.0
        tampered_vol = vit3d.unpatchify(tampered, cfg.spec)
        again = encode_visible(tampered_vol, plan, cfg, params).data
        assert np.array_equal(base, again)

    def test_plan_volume_mismatch(self):
        rng = np.random.default_rng(2)
        cfg = tiny_cfg()
        params = init_mae_params(cfg, rng)
        bad_plan = MaskPlan(visible=np.array([0]), masked=np.array([1, 2]), ratio=0.5)
        with pytest.raises(UsageError):
            mae_forward(rng.uniform(size=cfg.spec.volume), bad_plan, cfg, params)


class TestPretrain:
    def _volumes(self, n=4, extents=(6, 16, 16), seed=0):
        rng = np.random.default_rng(seed)
        return [rng.uniform(size=extents) for _ in range(n)]

    def test_accumulation_matches_large_batch(self):
        cfg = tiny_cfg()
        volumes = self._volumes(4)
        run_a = PretrainConfig(
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_epochs=1, total_epochs=2),
            batch_size=4,
            accumulation_steps=1,
            flip_w=False,
        )
        run_b = PretrainConfig(
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_epochs=1, total_epochs=2),
            batch_size=4,
            accumulation_steps=4,
            flip_w=False,
        )
        params_a, _ = pretrain(volumes, cfg, run_a, seed=3)
        params_b, _ = pretrain(volumes, cfg, run_b, seed=3)
        worst = max(
            np.abs(params_a[k].data - params_b[k].data).max() for k in params_a
        )
        assert worst <= 1e-10

    def test_same_seed_bit_identical(self):
        cfg = tiny_cfg()
        volumes = self._volumes(4)
        run = PretrainConfig(
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_epochs=1, total_epochs=2),
            batch_size=2,
        )
        params_a, log_a = pretrain(volumes, cfg, run, seed=4)
        params_b, log_b = pretrain(volumes, cfg, run, seed=4)
        assert log_a == log_b
        assert all(np.array_equal(params_a[k].data, params_b[k].data) for k in params_a)

    def test_loss_log_format(self):
        cfg = tiny_cfg()
        run = PretrainConfig(
            schedule=ScheduleConfig(peak_lr=1e-3, warmup_epochs=1, total_epochs=2),
            batch_size=2,
        )
        _, log = pretrain(self._volumes(2), cfg, run, seed=5)
        step_lines = [line for line in log if " step " in line]
        assert step_lines, "no per-step lines logged"
        for line in step_lines:
            parts = line.split()
            assert parts[0] == "epoch" and parts[2] == "step" and parts[4] == "loss"
            float(parts[5])

    def test_short_training_reduces_loss(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(6)
        # Structured volumes (shared depth profile) so there is signal.
        profile = rng.uniform(0.2, 0.8, size=16)
        volumes = [
            np.clip(
                np.broadcast_to(profile[None, :, None], (6, 16, 16))
                + 0.05 * rng.standard_normal((6, 16, 16)),
                0,
                1,
            )
            for _ in range(8)
        ]
        run = PretrainConfig(
            schedule=ScheduleConfig(peak_lr=3e-3, warmup_epochs=1, total_epochs=10),
            batch_size=4,
        )
        _, log = pretrain(volumes, cfg, run, seed=7)
        first = float(log[0].rsplit(" ", 1)[1])
        mean_lines = [line for line in log if "mean_loss" in line]
        last = float(mean_lines[-1].rsplit(" ", 1)[1])
        assert last < first
