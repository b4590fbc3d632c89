"""Gradient-based per-cube saliency for the 3D transformer.

The activations are the token embeddings captured at one encoder block,
reshaped onto the (gz, gh, gw) cube grid; channel weights follow the
Grad-CAM++ recipe with gradient-power approximations of the higher-order
terms (g^2 and g^3 instead of true second/third derivatives):

    alpha = g^2 / (2 g^2 + sum_grid(A) * g^3)
    weight_c = sum_grid(alpha * relu(g))
    map = relu(sum_c weight_c * A_c), max-normalized when nonzero

Per-slice views bilinearly upsample each grid layer to slice resolution;
the slow-scan view averages the grid over depth and resizes the
(Z, W) plane.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit3d
from .data import EnFaceImage, resample_array, write_enface
from .errors import UsageError
from .heads import head_forward, pool_tokens
from .towers import TowerConfig


@dataclass
class SaliencyMap:
    grid: np.ndarray          # (gz, gh, gw), non-negative, max 1 when nonzero
    per_slice: np.ndarray     # (Z, H, W) upsampled views
    slow_scan: np.ndarray     # (Z, W) view
    is_zero: bool
    block_index: int
    target_index: int


def _encode_with_capture(tokens, cfg, params, prefix):
    """Pre-norm encoder forward that returns every block's output."""
    captures = []
    x = tokens
    for i in range(cfg.depth):
        p = f"{prefix}block{i:02d}/"
        normed = T.layer_norm(x, params[f"{p}ln1/gain"], params[f"{p}ln1/bias"], cfg.eps)
        from .attention import multi_head_attention

        x = T.add(x, multi_head_attention(normed, params, f"{p}attn/", cfg.heads, cfg.tile))
        normed = T.layer_norm(x, params[f"{p}ln2/gain"], params[f"{p}ln2/bias"], cfg.eps)
        hidden = T.gelu(T.add(T.matmul(normed, params[f"{p}mlp/w1"]), params[f"{p}mlp/b1"]))
        x = T.add(x, T.add(T.matmul(hidden, params[f"{p}mlp/w2"]), params[f"{p}mlp/b2"]))
        captures.append(x)
    final = T.layer_norm(
        x, params[f"{prefix}final_ln/gain"], params[f"{prefix}final_ln/bias"], cfg.eps
    )
    return final, captures


def gradcam_saliency(volume, tower: TowerConfig, params, target_index=1,
                     block_index=-1, head_prefix="head/") -> SaliencyMap:
    """Saliency of one output logit with respect to one block's tokens."""
    spec = tower.spec
    grid = spec.grid
    voxels = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)

    tokens = vit3d.cube_embed(
        voxels.astype(np.float64), spec, params["vol/embed/weight"], params["vol/embed/bias"]
    )
    pe = vit3d.PositionalEmbeddings(
        planar=params["vol/pos/planar"], depth=params["vol/pos/depth"], grid=grid
    )
    tokens = vit3d.positional_encode(tokens, pe)
    final, captures = _encode_with_capture(tokens, tower.vit, params, "vol/vit/")
    if not -len(captures) <= block_index < len(captures):
        raise UsageError(f"block index {block_index} outside depth {len(captures)}")
    hook = captures[block_index]

    pooled = T.reshape(pool_tokens(final), (1, -1))
    logits = head_forward(pooled, params, head_prefix, train=False)
    if not 0 <= target_index < logits.data.shape[1]:
        raise UsageError(f"target index {target_index} outside {logits.data.shape[1]} outputs")
    target = T.take_rows(T.reshape(logits, (-1,)), np.array([target_index]))
    T.tensor_sum(target).backward()

    activations = hook.data  # (L, C)
    grads = hook.grad if hook.grad is not None else np.zeros_like(activations)
    gz, gh, gw = grid
    a = activations.T.reshape(-1, gz, gh, gw)
    g = grads.T.reshape(-1, gz, gh, gw)

    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + a.sum(axis=(1, 2, 3), keepdims=True) * g3
    alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
    weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2, 3))
    cam = np.maximum((weights[:, None, None, None] * a).sum(axis=0), 0.0)

    peak = cam.max()
    is_zero = not peak > 0
    if not is_zero:
        cam = cam / peak

    Z, H, W = spec.volume
    z_cube = spec.cube[0]
    per_slice = np.empty((Z, H, W), dtype=np.float64)
    for zs in range(Z):
        per_slice[zs] = resample_array(cam[min(zs // z_cube, gz - 1)], (H, W))
    slow = resample_array(cam.mean(axis=1), (Z, W))
    return SaliencyMap(
        grid=cam,
        per_slice=per_slice,
        slow_scan=slow,
        is_zero=is_zero,
        block_index=block_index % len(captures),
        target_index=target_index,
    )


def export_saliency(out_dir, smap: SaliencyMap, meta=None):
    """One ENF1 image per slice plus the slow-scan view and a JSON index."""
    os.makedirs(out_dir, exist_ok=True)
    meta = meta or {}
    entries = []
    for zs in range(smap.per_slice.shape[0]):
        name = f"saliency_slice_{zs:03d}.enf"
        write_enface(
            os.path.join(out_dir, name),
            EnFaceImage(
                pixels=smap.per_slice[zs].astype(np.float32),
                patient_id=meta.get("patient_id", ""),
                laterality=meta.get("laterality", "OD"),
                modality="SALIENCY",
            ),
        )
        entries.append(name)
    write_enface(
        os.path.join(out_dir, "saliency_slowscan.enf"),
        EnFaceImage(
            pixels=smap.slow_scan.astype(np.float32),
            patient_id=meta.get("patient_id", ""),
            laterality=meta.get("laterality", "OD"),
            modality="SALIENCY",
        ),
    )
    index = {
        "block_index": smap.block_index,
        "is_zero": smap.is_zero,
        "slices": entries,
        "slow_scan": "saliency_slowscan.enf",
        "target_index": smap.target_index,
    }
    with open(os.path.join(out_dir, "saliency_index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return index
