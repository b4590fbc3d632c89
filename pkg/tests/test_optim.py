"""Schedules, the layer-wise learning-rate plan, and AdamW mechanics."""

import numpy as np
import pytest

from cubevit import tensor as T
from cubevit.errors import UsageError
from cubevit.optim import (
    AdamW,
    AdamWConfig,
    ScheduleConfig,
    layerwise_lr_plan,
    lr_schedule,
    lr_scale_for_param,
)


class TestLrSchedule:
    CFG = ScheduleConfig(peak_lr=1.6e-3, warmup_epochs=5, total_epochs=50, floor_lr=1e-5)

    def test_warmup_ends_at_peak(self):
        steps_per_epoch = 10
        warmup = self.CFG.warmup_epochs * steps_per_epoch
        assert lr_schedule(warmup, self.CFG, steps_per_epoch) == pytest.approx(1.6e-3)

    def test_final_step_reaches_floor(self):
        steps_per_epoch = 10
        last = self.CFG.total_epochs * steps_per_epoch - 1
        assert lr_schedule(last, self.CFG, steps_per_epoch) == pytest.approx(self.CFG.floor_lr)

    def test_cosine_midpoint(self):
        steps_per_epoch = 10
        warmup = self.CFG.warmup_epochs * steps_per_epoch
        last = self.CFG.total_epochs * steps_per_epoch - 1
        mid = (warmup + last) / 2.0
        expected = self.CFG.floor_lr + 0.5 * (self.CFG.peak_lr - self.CFG.floor_lr)
        assert lr_schedule(mid, self.CFG, steps_per_epoch) == pytest.approx(expected)

    def test_continuous_at_boundary(self):
        steps_per_epoch = 7
        warmup = self.CFG.warmup_epochs * steps_per_epoch
        # The linear formula extrapolated to the boundary equals the cosine
        # branch evaluated there.
        linear_at_boundary = self.CFG.peak_lr * warmup / warmup
        assert lr_schedule(warmup, self.CFG, steps_per_epoch) == pytest.approx(linear_at_boundary)

    def test_zero_at_start(self):
        assert lr_schedule(0, self.CFG, 10) == 0.0

    def test_invalid_horizon(self):
        with pytest.raises(UsageError):
            ScheduleConfig(peak_lr=1e-3, warmup_epochs=10, total_epochs=10)


class TestLayerwisePlan:
    def test_paper_freezing_recipe(self):
        layers, head = layerwise_lr_plan(24, 0.65, 16, 1e-4)
        assert layers[:16] == [0.0] * 16
        assert layers[23] == pytest.approx(0.65e-4)
        assert head == pytest.approx(1e-4)

    def test_uniform_when_decay_one(self):
        layers, head = layerwise_lr_plan(4, 1.0, 0, 3e-3)
        assert layers == [pytest.approx(3e-3)] * 4
        assert head == pytest.approx(3e-3)

    def test_finetune_recipe_strictly_increasing(self):
        layers, head = layerwise_lr_plan(24, 0.65, 0, 1e-4)
        assert all(b > a for a, b in zip(layers, layers[1:]))
        assert head > layers[-1]

    def test_invalid_decay(self):
        with pytest.raises(UsageError):
            layerwise_lr_plan(4, 0.0, 0, 1e-3)
        with pytest.raises(UsageError):
            layerwise_lr_plan(4, -0.5, 0, 1e-3)

    def test_param_name_mapping(self):
        depth = 4
        assert lr_scale_for_param("vol/vit/block00/attn/wq", depth, 0.5, 1) == 0.0
        assert lr_scale_for_param("vol/vit/block03/mlp/w1", depth, 0.5, 1) == pytest.approx(0.5)
        assert lr_scale_for_param("vol/embed/weight", depth, 0.5, 1) == 0.0
        assert lr_scale_for_param("vol/pos/planar", depth, 0.5, 0) == pytest.approx(0.5 ** 4)
        assert lr_scale_for_param("head/weight", depth, 0.5, 1) == 1.0
        assert lr_scale_for_param("vol/vit/final_ln/gain", depth, 0.5, 1) == 1.0


class TestAdamW:
    def test_first_step_magnitude_is_lr(self):
        for g in (0.37, -2.4, 1e-3):
            p = T.Tensor(np.array([1.0]), requires_grad=True)
            p.grad = np.array([g])
            opt = AdamW({"p": p}, AdamWConfig(betas=(0.9, 0.95), weight_decay=0.0))
            opt.step(lr=1e-2)
            delta = p.data[0] - 1.0
            assert np.sign(delta) == -np.sign(g)
            assert abs(abs(delta) - 1e-2) < 1e-7

    def test_decoupled_weight_decay(self):
        p = T.Tensor(np.array([[2.0, -2.0]]), requires_grad=True)
        p.grad = np.zeros((1, 2))
        opt = AdamW({"w": p}, AdamWConfig(weight_decay=0.1))
        opt.step(lr=0.5)
        # Zero gradient: the only movement is -lr * wd * p.
        np.testing.assert_allclose(p.data, [[2.0 - 0.05 * 2.0, -2.0 + 0.05 * 2.0]], atol=1e-12)

    def test_gain_bias_excluded_from_decay(self):
        gain = T.Tensor(np.ones(3), requires_grad=True)
        gain.grad = np.zeros(3)
        opt = AdamW({"ln/gain": gain}, AdamWConfig(weight_decay=0.5))
        opt.step(lr=0.1)
        np.testing.assert_array_equal(gain.data, np.ones(3))

    def test_frozen_scale_keeps_bits(self):
        p = T.Tensor(np.array([0.123456789, -9.87654321]), requires_grad=True)
        before = p.data.copy()
        opt = AdamW({"frozen": p}, lr_scales={"frozen": 0.0})
        for _ in range(5):
            p.grad = np.array([1.0, -1.0])
            opt.step(lr=1e-2)
        assert np.array_equal(p.data, before)
        assert np.array_equal(opt.m["frozen"], np.zeros(2))

    def test_state_round_trip(self):
        rng = np.random.default_rng(0)
        p = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        opt = AdamW({"w": p})
        for _ in range(3):
            p.grad = rng.normal(size=(3, 2))
            opt.step(lr=1e-3)
        state = {k: v.copy() for k, v in opt.state_arrays().items()}

        fresh = AdamW({"w": T.Tensor(p.data.copy(), requires_grad=True)})
        fresh.load_state_arrays(state)
        assert fresh.step_count == 3
        np.testing.assert_array_equal(fresh.m["w"], opt.m["w"])
        np.testing.assert_array_equal(fresh.v["w"], opt.v["w"])
