"""Modality encoder towers: cube tokenization + ViT stack + mean pooling.

A tower turns one volume (or one en-face image lifted to a depth-1
volume) into a single pooled embedding. The alignment and fine-tuning
trainers both build on this forward path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit3d
from .errors import UsageError
from .heads import pool_tokens


@dataclass(frozen=True)
class TowerConfig:
    """One modality encoder: cube tokenization plus a ViT stack."""

    spec: vit3d.CubeSpec
    vit: vit3d.ViTConfig


def init_tower_params(cfg: TowerConfig, rng, prefix, std=0.02, dtype=np.float64):
    params = {}
    params[f"{prefix}embed/weight"] = T.Tensor(
        rng.normal(0.0, std, size=(cfg.spec.cube_voxels, cfg.vit.dim)).astype(dtype),
        requires_grad=True,
    )
    params[f"{prefix}embed/bias"] = T.Tensor(
        np.zeros(cfg.vit.dim, dtype=dtype), requires_grad=True
    )
    pe = vit3d.init_positional(cfg.spec.grid, cfg.vit.dim, rng, std, dtype)
    params[f"{prefix}pos/planar"] = pe.planar
    params[f"{prefix}pos/depth"] = pe.depth
    params.update(vit3d.init_vit_params(cfg.vit, rng, f"{prefix}vit/", std, dtype))
    return params


def adopt_mae_encoder(mae_params, prefix):
    """Rename a pretrained masked-autoencoder encoder into tower keys."""
    renames = {
        "embed/weight": f"{prefix}embed/weight",
        "embed/bias": f"{prefix}embed/bias",
        "pos/enc_planar": f"{prefix}pos/planar",
        "pos/enc_depth": f"{prefix}pos/depth",
    }
    out = {}
    for name, tensor in mae_params.items():
        if name in renames:
            out[renames[name]] = tensor
        elif name.startswith("enc/"):
            out[f"{prefix}vit/{name[len('enc/'):]}"] = tensor
    return out


def tower_tokens(x, cfg: TowerConfig, params, prefix) -> T.Tensor:
    tokens = vit3d.cube_embed(
        x, cfg.spec, params[f"{prefix}embed/weight"], params[f"{prefix}embed/bias"]
    )
    pe = vit3d.PositionalEmbeddings(
        planar=params[f"{prefix}pos/planar"],
        depth=params[f"{prefix}pos/depth"],
        grid=cfg.spec.grid,
    )
    tokens = vit3d.positional_encode(tokens, pe)
    return vit3d.encode(tokens, cfg.vit, params, f"{prefix}vit/")


def tower_embed(x, cfg: TowerConfig, params, prefix) -> T.Tensor:
    """Pooled (1, dim) representation of one volume or image."""
    pooled = pool_tokens(tower_tokens(x, cfg, params, prefix))
    return T.reshape(pooled, (1, -1))


def as_volume(image):
    """Lift an (H, W) image to a depth-1 volume for the planar tower."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise UsageError(f"expected a 2D image, got shape {image.shape}")
    return image[None, :, :]
