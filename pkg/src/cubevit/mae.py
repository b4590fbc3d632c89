"""Masked-autoencoder pretraining for cube-token volumes.

The encoder only ever sees the visible tokens; the decoder restores the
full sequence by inserting a learnable mask token at every masked slot
(positional encodings are added after insertion, over the restored
sequence) and reconstructs raw voxels per cube. The loss is the mean
squared voxel error over masked cubes only, so predictions at visible
positions cannot move it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import vit3d
from .errors import NumericError, UsageError
from .optim import AdamW, AdamWConfig, ScheduleConfig, lr_schedule


@dataclass(frozen=True)
class MaskPlan:
    """Disjoint visible/masked index partition of a token sequence."""

    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def length(self):
        return self.visible.size + self.masked.size


def sample_mask(length, ratio, seed_or_rng) -> MaskPlan:
    """Uniform without-replacement mask; deterministic for a given seed."""
    if not 0.0 <= ratio < 1.0:
        raise UsageError(f"mask ratio must be in [0, 1), got {ratio}")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    n_visible = int(np.rint((1.0 - ratio) * length))
    perm = rng.permutation(length)
    visible = np.sort(perm[:n_visible])
    masked = np.sort(perm[n_visible:])
    return MaskPlan(visible=visible, masked=masked, ratio=float(ratio))


@dataclass(frozen=True)
class MAEConfig:
    spec: vit3d.CubeSpec
    encoder: vit3d.ViTConfig
    decoder: vit3d.ViTConfig
    mask_ratio: float = 0.9
    loss_on_visible: bool = False

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise UsageError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")


def init_mae_params(cfg: MAEConfig, rng, std=0.02, dtype=np.float64):
    """All named tensors for one encoder-decoder pair."""
    params = {}
    params["embed/weight"] = T.Tensor(
        rng.normal(0.0, std, size=(cfg.spec.cube_voxels, cfg.encoder.dim)).astype(dtype),
        requires_grad=True,
    )
    params["embed/bias"] = T.Tensor(
        np.zeros(cfg.encoder.dim, dtype=dtype), requires_grad=True
    )
    enc_pe = vit3d.init_positional(cfg.spec.grid, cfg.encoder.dim, rng, std, dtype)
    params["pos/enc_planar"] = enc_pe.planar
    params["pos/enc_depth"] = enc_pe.depth
    params.update(vit3d.init_vit_params(cfg.encoder, rng, "enc/", std, dtype))

    params["dec_embed/weight"] = T.Tensor(
        rng.normal(0.0, std, size=(cfg.encoder.dim, cfg.decoder.dim)).astype(dtype),
        requires_grad=True,
    )
    params["dec_embed/bias"] = T.Tensor(
        np.zeros(cfg.decoder.dim, dtype=dtype), requires_grad=True
    )
    params["mask_token"] = T.Tensor(
        rng.normal(0.0, std, size=(1, cfg.decoder.dim)).astype(dtype),
        requires_grad=True,
    )
    dec_pe = vit3d.init_positional(cfg.spec.grid, cfg.decoder.dim, rng, std, dtype)
    params["pos/dec_planar"] = dec_pe.planar
    params["pos/dec_depth"] = dec_pe.depth
    params.update(vit3d.init_vit_params(cfg.decoder, rng, "dec/", std, dtype))

    params["recon/weight"] = T.Tensor(
        rng.normal(0.0, std, size=(cfg.decoder.dim, cfg.spec.cube_voxels)).astype(dtype),
        requires_grad=True,
    )
    params["recon/bias"] = T.Tensor(
        np.zeros(cfg.spec.cube_voxels, dtype=dtype), requires_grad=True
    )
    return params


def _positional(params, which, grid):
    return vit3d.PositionalEmbeddings(
        planar=params[f"pos/{which}_planar"],
        depth=params[f"pos/{which}_depth"],
        grid=grid,
    )


def encode_visible(volume, plan: MaskPlan, cfg: MAEConfig, params):
    """Cube-embed, positionally encode, then run the encoder on the
    visible subset only."""
    tokens = vit3d.cube_embed(volume, cfg.spec, params["embed/weight"], params["embed/bias"])
    tokens = vit3d.positional_encode(tokens, _positional(params, "enc", cfg.spec.grid))
    visible_tokens = T.take_rows(tokens, plan.visible)
    return vit3d.encode(visible_tokens, cfg.encoder, params, "enc/")


def encode_full(volume, cfg: MAEConfig, params):
    """Encoder forward over the whole sequence (downstream feature path)."""
    tokens = vit3d.cube_embed(volume, cfg.spec, params["embed/weight"], params["embed/bias"])
    tokens = vit3d.positional_encode(tokens, _positional(params, "enc", cfg.spec.grid))
    return vit3d.encode(tokens, cfg.encoder, params, "enc/")


def mae_forward(volume, plan: MaskPlan, cfg: MAEConfig, params):
    """One masked-autoencoder pass; returns (reconstruction, scalar loss).

    The reconstruction has one row of z*h*w voxel predictions per cube, in
    grid order.
    """
    L = vit3d.sequence_length(cfg.spec)
    if plan.length != L:
        raise UsageError(
            f"mask plan covers {plan.length} tokens but the volume has {L}"
        )
    encoded = encode_visible(volume, plan, cfg, params)
    narrowed = T.add(
        T.matmul(encoded, params["dec_embed/weight"]), params["dec_embed/bias"]
    )
    mask_tokens = T.take_rows(
        params["mask_token"], np.zeros(plan.masked.size, dtype=np.int64)
    )
    stacked = T.concat_rows([narrowed, mask_tokens])
    # Restore grid order: row i of the decoder input is token i again.
    order = np.concatenate([plan.visible, plan.masked])
    restore = np.empty(L, dtype=np.int64)
    restore[order] = np.arange(L)
    sequence = T.take_rows(stacked, restore)
    sequence = vit3d.positional_encode(sequence, _positional(params, "dec", cfg.spec.grid))
    decoded = vit3d.encode(sequence, cfg.decoder, params, "dec/")
    recon = T.add(T.matmul(decoded, params["recon/weight"]), params["recon/bias"])

    target = patch_targets(volume, cfg.spec)
    loss = masked_mse(recon, target, plan, loss_on_visible=cfg.loss_on_visible)
    return recon, loss


def patch_targets(volume, spec) -> np.ndarray:
    data = volume.data if isinstance(volume, T.Tensor) else volume
    return vit3d.patchify(data, spec)


def masked_mse(recon: T.Tensor, target: np.ndarray, plan: MaskPlan, loss_on_visible=False):
    """Mean squared voxel error over the masked cubes (optionally all)."""
    rows = np.arange(plan.length) if loss_on_visible else plan.masked
    if rows.size == 0:
        raise UsageError("loss needs at least one masked cube")
    diff = T.sub(T.take_rows(recon, rows), T.Tensor(target[rows]))
    return T.mean(T.mul(diff, diff))


def eval_masked_loss(volumes, cfg: MAEConfig, params, seed=0) -> float:
    """Deterministic reconstruction loss over a dataset: volume i gets the
    mask derived from (seed, i). Used to verify checkpoint reloads."""
    total = 0.0
    length = vit3d.sequence_length(cfg.spec)
    for i, vol in enumerate(volumes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        plan = sample_mask(length, cfg.mask_ratio, rng)
        _, loss = mae_forward(vol, plan, cfg, params)
        total += float(loss.data)
    return total / len(volumes)


@dataclass
class PretrainConfig:
    schedule: ScheduleConfig
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    batch_size: int = 4
    accumulation_steps: int = 1
    flip_w: bool = True
    flip_z: bool = False


def pretrain(volumes, cfg: MAEConfig, run: PretrainConfig, seed=0, params=None,
             optimizer=None, log=None):
    """Masked-autoencoder training loop; deterministic for a given seed.

    ``volumes`` is a sequence of (Z, H, W) arrays sharing the spec extents.
    Returns (params, log lines). Log lines follow
    ``epoch <e> step <s> loss <v>`` with the per-epoch mean appended.
    """
    rng = np.random.default_rng(seed)
    dtype = np.float64 if volumes[0].dtype == np.float64 else np.float32
    if params is None:
        params = init_mae_params(cfg, rng, dtype=dtype)
    if optimizer is None:
        optimizer = AdamW(params, run.optimizer)
    log = [] if log is None else log

    n = len(volumes)
    micro = max(1, run.batch_size // run.accumulation_steps)
    steps_per_epoch = max(1, n // run.batch_size)
    step = 0
    for epoch in range(run.schedule.total_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch = order[b * run.batch_size : (b + 1) * run.batch_size]
            optimizer.zero_grad()
            batch_loss = 0.0
            for a0 in range(0, batch.size, micro):
                chunk = batch[a0 : a0 + micro]
                losses = []
                for idx in chunk:
                    vol = volumes[idx]
                    if run.flip_w and rng.random() < 0.5:
                        vol = vol[:, :, ::-1].copy()
                    if run.flip_z and rng.random() < 0.5:
                        vol = vol[::-1].copy()
                    plan = sample_mask(
                        vit3d.sequence_length(cfg.spec), cfg.mask_ratio, rng
                    )
                    _, loss = mae_forward(vol, plan, cfg, params)
                    losses.append(loss)
                total = losses[0]
                for extra in losses[1:]:
                    total = T.add(total, extra)
                # Mean-loss convention across the whole batch, so microbatch
                # accumulation matches one large-batch step.
                total = T.div(total, float(batch.size))
                total.backward()
                batch_loss += float(total.data)
            if not np.isfinite(batch_loss):
                raise NumericError(f"pretraining diverged at step {step}")
            lr = lr_schedule(step, run.schedule, steps_per_epoch)
            optimizer.step(lr)
            log.append(f"epoch {epoch} step {step} loss {batch_loss:.10f}")
            epoch_losses.append(batch_loss)
            step += 1
        log.append(
            f"epoch {epoch} mean_loss {float(np.mean(epoch_losses)):.10f}"
        )
    return params, log
