"""AdamW with decoupled weight decay, warmup + cosine learning-rate
schedules, and the layer-wise learning-rate plan used for fine-tuning
and contrastive alignment.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    warmup_epochs: int
    total_epochs: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs >= self.total_epochs:
            raise UsageError("warmup must be shorter than the total horizon")
        if self.floor_lr > self.peak_lr:
            raise UsageError("floor lr above peak lr")


def lr_schedule(step, cfg: ScheduleConfig, steps_per_epoch: int) -> float:
    """Linear 0 -> peak over the warmup epochs, then cosine to the floor.

    ``step`` counts optimizer steps from 0; the last scheduled step is
    total_epochs * steps_per_epoch - 1. The two branches agree at the
    boundary (both give peak_lr), so the schedule is continuous.
    """
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warmup:
        return cfg.peak_lr * step / warmup
    last = total - 1
    if last <= warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (last - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


def layerwise_lr_plan(depth, decay, freeze_count, base_lr):
    """Per-layer learning rates plus the head learning rate.

    Layer i (0 = input-most) gets base * decay**(depth - i); the first
    ``freeze_count`` layers get exactly 0; the head gets the base rate.
    """
    if decay <= 0:
        raise UsageError("layer decay must be positive")
    if decay > 1:
        raise UsageError("layer decay above 1 would amplify early layers")
    if freeze_count > depth:
        raise UsageError("cannot freeze more layers than the stack depth")
    layers = [
        0.0 if i < freeze_count else base_lr * decay ** (depth - i)
        for i in range(depth)
    ]
    return layers, base_lr


_BLOCK_RE = re.compile(r"block(\d+)/")


def lr_scale_for_param(name, depth, decay, freeze_count):
    """Relative lr multiplier for a named parameter under the layer plan.

    Block parameters map to their layer index; embedding-side parameters
    (cube embed, positional tables, mask token) count as layer 0; head and
    final-norm parameters get the full base rate.
    """
    layers, head = layerwise_lr_plan(depth, decay, freeze_count, 1.0)
    match = _BLOCK_RE.search(name)
    if match:
        return layers[int(match.group(1))]
    if any(tag in name for tag in ("embed", "pos/", "mask_token")):
        return layers[0]
    return head


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05


def no_decay_param(name, tensor):
    """Gains, biases, and other vectors are excluded from weight decay."""
    return tensor.data.ndim < 2 or name.endswith(("gain", "bias"))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Updates iterate parameter names in sorted order so repeated runs are
    bit-identical. Parameters whose lr scale is 0 are skipped entirely
    (values and moments untouched), which is how layer freezing works.
    """

    def __init__(self, params: dict, cfg: AdamWConfig = None, lr_scales: dict = None):
        self.params = params
        self.cfg = cfg or AdamWConfig()
        self.lr_scales = lr_scales or {}
        self.names = sorted(params.keys())
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def zero_grad(self):
        for n in self.names:
            self.params[n].grad = None

    def step(self, lr=None):
        lr = self.cfg.lr if lr is None else lr
        beta1, beta2 = self.cfg.betas
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - beta1 ** t
        bias2 = 1.0 - beta2 ** t
        for n in self.names:
            scale = self.lr_scales.get(n, 1.0)
            if scale == 0.0:
                continue
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.cfg.eps)
            if self.cfg.weight_decay and not no_decay_param(n, p):
                update = update + self.cfg.weight_decay * p.data
            p.data = p.data - (lr * scale) * update

    def state_arrays(self):
        """Optimizer state as named arrays for checkpointing."""
        state = {"adam_step": np.array([float(self.step_count)], dtype=np.float64)}
        for n in self.names:
            state[f"adam_m/{n}"] = self.m[n]
            state[f"adam_v/{n}"] = self.v[n]
        return state

    def load_state_arrays(self, state):
        self.step_count = int(state["adam_step"][0])
        for n in self.names:
            self.m[n] = np.array(state[f"adam_m/{n}"], dtype=self.m[n].dtype).reshape(
                self.m[n].shape
            )
            self.v[n] = np.array(state[f"adam_v/{n}"], dtype=self.v[n].dtype).reshape(
                self.v[n].shape
            )
