"""3D-aware vision transformer: cube tokenization, factored positional
embeddings, and pre-norm encoder/decoder stacks.

A volume of extents (Z, H, W) is split into non-overlapping (z, h, w)
cubes, each flattened (depth-major) and mapped by one affine layer to a
token. Tokens are ordered lexicographically by grid position (iz, ih, iw),
which is the documented bijection between flat token index and the cube
grid. Setting z = 1 (or duplicating a slice to depth z) turns the same
code into a planar ViT over a single slice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import init_attention_params, multi_head_attention
from .errors import NumericError, UsageError


@dataclass(frozen=True)
class CubeSpec:
    """Cube extents (z, h, w) applied to volume extents (Z, H, W)."""

    volume: tuple
    cube: tuple
    pad_to_multiple: bool = False

    def __post_init__(self):
        if len(self.volume) != 3 or len(self.cube) != 3:
            raise UsageError("CubeSpec needs 3 volume extents and 3 cube extents")
        if any(e < 1 for e in self.volume) or any(e < 1 for e in self.cube):
            raise UsageError("CubeSpec extents must be positive")
        if not self.pad_to_multiple:
            for big, small in zip(self.volume, self.cube):
                if big % small != 0:
                    raise UsageError(
                        f"volume extents {self.volume} not divisible by cube "
                        f"{self.cube}; enable pad_to_multiple to zero-pad"
                    )

    @property
    def padded_volume(self):
        return tuple(
            -(-big // small) * small for big, small in zip(self.volume, self.cube)
        )

    @property
    def grid(self):
        """(gz, gh, gw): cubes per axis."""
        return tuple(
            big // small for big, small in zip(self.padded_volume, self.cube)
        )

    @property
    def cube_voxels(self):
        z, h, w = self.cube
        return z * h * w


def sequence_length(spec: CubeSpec) -> int:
    """Token count (Z * H * W) / (z * h * w) on the (padded) grid."""
    gz, gh, gw = spec.grid
    return gz * gh * gw


def flat_index(spec: CubeSpec, iz, ih, iw) -> int:
    gz, gh, gw = spec.grid
    if not (0 <= iz < gz and 0 <= ih < gh and 0 <= iw < gw):
        raise UsageError(f"grid position ({iz}, {ih}, {iw}) outside {spec.grid}")
    return (iz * gh + ih) * gw + iw


def grid_index(spec: CubeSpec, flat: int):
    gz, gh, gw = spec.grid
    if not 0 <= flat < gz * gh * gw:
        raise UsageError(f"flat index {flat} outside sequence of {gz * gh * gw}")
    iz, rest = divmod(flat, gh * gw)
    ih, iw = divmod(rest, gw)
    return iz, ih, iw


def patchify(volume: np.ndarray, spec: CubeSpec) -> np.ndarray:
    """Rearrange (Z, H, W) voxels into (L, z*h*w) cube rows, grid order."""
    volume = np.asarray(volume)
    if volume.shape != tuple(spec.volume):
        raise UsageError(
            f"volume shape {volume.shape} does not match spec {spec.volume}"
        )
    Z, H, W = spec.padded_volume
    if volume.shape != (Z, H, W):
        padded = np.zeros((Z, H, W), dtype=volume.dtype)
        padded[: volume.shape[0], : volume.shape[1], : volume.shape[2]] = volume
        volume = padded
    z, h, w = spec.cube
    gz, gh, gw = spec.grid
    blocks = volume.reshape(gz, z, gh, h, gw, w)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(blocks.reshape(gz * gh * gw, z * h * w))


def unpatchify(rows: np.ndarray, spec: CubeSpec) -> np.ndarray:
    """Inverse of :func:`patchify` on the padded grid."""
    z, h, w = spec.cube
    gz, gh, gw = spec.grid
    blocks = rows.reshape(gz, gh, gw, z, h, w).transpose(0, 3, 1, 4, 2, 5)
    full = blocks.reshape(gz * z, gh * h, gw * w)
    Z, H, W = spec.volume
    return np.ascontiguousarray(full[:Z, :H, :W])


def cube_embed(volume, spec: CubeSpec, weight: T.Tensor, bias: T.Tensor) -> T.Tensor:
    """Affine map from each cube's voxels to a token; equals a
    non-overlapping 3D convolution with stride = kernel = cube size."""
    if isinstance(volume, T.Tensor):
        rows = T.reshape(_patchify_op(volume, spec), (-1, spec.cube_voxels))
    else:
        rows = T.Tensor(patchify(volume, spec))
    if weight.data.shape[0] != spec.cube_voxels:
        raise UsageError(
            f"cube_embed weight expects {spec.cube_voxels} inputs, "
            f"got {weight.data.shape}"
        )
    return T.add(T.matmul(rows, weight), bias)


def _patchify_op(volume: T.Tensor, spec: CubeSpec) -> T.Tensor:
    data = patchify(volume.data, spec)

    def backward():
        if out.grad is None:
            return
        T._accumulate(volume, unpatchify(out.grad, spec))

    out = T._node(data, (volume,), backward)
    return out


@dataclass(frozen=True)
class ViTConfig:
    """Transformer stack settings for one encoder or decoder."""

    depth: int
    heads: int
    dim: int
    role: str = "encoder"
    mlp_ratio: int = 4
    tile: int = 64
    eps: float = 1e-6

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise UsageError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.role not in ("encoder", "decoder"):
            raise UsageError(f"role must be encoder or decoder, got {self.role!r}")


# Paper-scale presets exist to be constructed and shape-checked; training
# runs use the desk-scale configs from the CLI configs.
VIT_LARGE = ViTConfig(depth=24, heads=16, dim=1024, role="encoder")
VIT_SMALL_DECODER = ViTConfig(depth=8, heads=16, dim=512, role="decoder")


@dataclass
class PositionalEmbeddings:
    """Factored tables: planar (gh*gw, dim) plus depth (gz, dim).

    Token (iz, ih, iw) receives planar[ih*gw + iw] + depth[iz].
    """

    planar: T.Tensor
    depth: T.Tensor
    grid: tuple

    def lookup_indices(self):
        gz, gh, gw = self.grid
        per_slice = np.arange(gh * gw, dtype=np.int64)
        planar_idx = np.tile(per_slice, gz)
        depth_idx = np.repeat(np.arange(gz, dtype=np.int64), gh * gw)
        return planar_idx, depth_idx


def init_positional(grid, dim, rng, std=0.02, dtype=np.float64) -> PositionalEmbeddings:
    gz, gh, gw = grid
    planar = T.Tensor(
        rng.normal(0.0, std, size=(gh * gw, dim)).astype(dtype), requires_grad=True
    )
    depth = T.Tensor(
        rng.normal(0.0, std, size=(gz, dim)).astype(dtype), requires_grad=True
    )
    return PositionalEmbeddings(planar=planar, depth=depth, grid=tuple(grid))


def positional_encode(tokens: T.Tensor, pe: PositionalEmbeddings) -> T.Tensor:
    gz, gh, gw = pe.grid
    if tokens.data.shape[0] != gz * gh * gw:
        raise UsageError(
            f"token count {tokens.data.shape[0]} does not match grid {pe.grid}"
        )
    planar_idx, depth_idx = pe.lookup_indices()
    encoded = T.add(tokens, T.take_rows(pe.planar, planar_idx))
    return T.add(encoded, T.take_rows(pe.depth, depth_idx))


def init_vit_params(cfg: ViTConfig, rng, prefix="", std=0.02, dtype=np.float64) -> dict:
    """Named parameter tensors for a pre-norm transformer stack."""
    params = {}
    hidden = cfg.dim * cfg.mlp_ratio
    for i in range(cfg.depth):
        p = f"{prefix}block{i:02d}/"
        for name, t in init_attention_params(cfg.dim, rng, std, dtype).items():
            params[f"{p}attn/{name}"] = t
        params[f"{p}ln1/gain"] = T.Tensor(np.ones(cfg.dim, dtype=dtype), requires_grad=True)
        params[f"{p}ln1/bias"] = T.Tensor(np.zeros(cfg.dim, dtype=dtype), requires_grad=True)
        params[f"{p}ln2/gain"] = T.Tensor(np.ones(cfg.dim, dtype=dtype), requires_grad=True)
        params[f"{p}ln2/bias"] = T.Tensor(np.zeros(cfg.dim, dtype=dtype), requires_grad=True)
        params[f"{p}mlp/w1"] = T.Tensor(
            rng.normal(0.0, std, size=(cfg.dim, hidden)).astype(dtype), requires_grad=True
        )
        params[f"{p}mlp/b1"] = T.Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        params[f"{p}mlp/w2"] = T.Tensor(
            rng.normal(0.0, std, size=(hidden, cfg.dim)).astype(dtype), requires_grad=True
        )
        params[f"{p}mlp/b2"] = T.Tensor(np.zeros(cfg.dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}final_ln/gain"] = T.Tensor(np.ones(cfg.dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}final_ln/bias"] = T.Tensor(np.zeros(cfg.dim, dtype=dtype), requires_grad=True)
    return params


def encode(tokens: T.Tensor, cfg: ViTConfig, params: dict, prefix="") -> T.Tensor:
    """Pre-norm transformer: x += attn(ln(x)); x += mlp(ln(x)); final ln."""
    x = tokens
    for i in range(cfg.depth):
        p = f"{prefix}block{i:02d}/"
        normed = T.layer_norm(x, params[f"{p}ln1/gain"], params[f"{p}ln1/bias"], cfg.eps)
        x = T.add(x, multi_head_attention(normed, params, f"{p}attn/", cfg.heads, cfg.tile))
        normed = T.layer_norm(x, params[f"{p}ln2/gain"], params[f"{p}ln2/bias"], cfg.eps)
        hidden = T.gelu(T.add(T.matmul(normed, params[f"{p}mlp/w1"]), params[f"{p}mlp/b1"]))
        x = T.add(x, T.add(T.matmul(hidden, params[f"{p}mlp/w2"]), params[f"{p}mlp/b2"]))
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activations after layer {i}")
    return T.layer_norm(
        x, params[f"{prefix}final_ln/gain"], params[f"{prefix}final_ln/bias"], cfg.eps
    )
