"""Contrastive alignment between volume and en-face embeddings.

Each modality runs through its encoder tower, then a two-layer projection
head with a GELU between (and no dropout) maps the pooled vector into the
shared space. Matched items are pulled together with a symmetric InfoNCE
loss over cosine similarities scaled by a learnable temperature. For three
modalities the loss is the mean of the three pairwise terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericError, UsageError
from .optim import AdamW, AdamWConfig, lr_scale_for_param
from .towers import TowerConfig, as_volume, init_tower_params, tower_embed


# -- losses ------------------------------------------------------------------


def symmetric_infonce(a: T.Tensor, b: T.Tensor, tau) -> T.Tensor:
    """Symmetric cross-entropy InfoNCE over pairwise cosine similarities.

    For batches a, b of N matched rows:
        L = -(1/2N) * sum_j [ log softmax_row(S/tau)[j,j]
                            + log softmax_col(S/tau)[j,j] ]
    with S[j,k] = cos(a_j, b_k). Symmetric in its arguments, invariant to
    a common positive rescaling of every embedding, and 0 when N = 1.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape != b.data.shape:
        raise UsageError("expected two equal-shape (N, D) embedding batches")
    n = a.data.shape[0]
    if n < 1:
        raise UsageError("empty embedding batch")
    if not isinstance(tau, T.Tensor) and tau <= 0:
        raise UsageError(f"temperature must be positive, got {tau}")
    logits = T.div(T.cosine_matrix(a, b), tau)
    row_diag = T.diagonal(T.log_softmax(logits, axis=1))
    col_diag = T.diagonal(T.log_softmax(logits, axis=0))
    return T.neg(T.div(T.add(T.tensor_sum(row_diag), T.tensor_sum(col_diag)), 2.0 * n))


def trimodal_infonce(a: T.Tensor, b: T.Tensor, c: T.Tensor, tau) -> T.Tensor:
    """Mean of the three pairwise symmetric InfoNCE losses."""
    if not (a.data.shape == b.data.shape == c.data.shape):
        raise UsageError("trimodal batches must share shape")
    total = T.add(
        T.add(symmetric_infonce(a, b, tau), symmetric_infonce(a, c, tau)),
        symmetric_infonce(b, c, tau),
    )
    return T.div(total, 3.0)


# -- temperature ----------------------------------------------------------------

TAU_MIN, TAU_MAX = 0.01, 100.0


@dataclass
class Temperature:
    """Learnable positive temperature, optimized in log space and clamped
    to [0.01, 100] after every step."""

    log_tau: T.Tensor

    @classmethod
    def create(cls, init=0.07, dtype=np.float64):
        if init <= 0:
            raise UsageError("temperature init must be positive")
        return cls(T.Tensor(np.log(np.array(init, dtype=dtype)), requires_grad=True))

    def value(self) -> T.Tensor:
        return T.exp(self.log_tau)

    def clamp(self):
        self.log_tau.data = np.clip(
            self.log_tau.data, math.log(TAU_MIN), math.log(TAU_MAX)
        )


# -- projection heads -------------------------------------------------------------


def init_projection_params(dim, rng, prefix, std=0.02, dtype=np.float64):
    """Two affine maps of the embedding width with a GELU between."""
    params = {}
    params[f"{prefix}w1"] = T.Tensor(
        rng.normal(0.0, std, size=(dim, dim)).astype(dtype), requires_grad=True
    )
    params[f"{prefix}b1"] = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}w2"] = T.Tensor(
        rng.normal(0.0, std, size=(dim, dim)).astype(dtype), requires_grad=True
    )
    params[f"{prefix}b2"] = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return params


def projection_head(x: T.Tensor, params, prefix) -> T.Tensor:
    hidden = T.gelu(T.add(T.matmul(x, params[f"{prefix}w1"]), params[f"{prefix}b1"]))
    return T.add(T.matmul(hidden, params[f"{prefix}w2"]), params[f"{prefix}b2"])


# -- training ----------------------------------------------------------------------


@dataclass
class AlignConfig:
    volume_tower: TowerConfig
    enface_tower: TowerConfig
    trimodal: bool = False
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    warmup_steps: int = 200
    tau_init: float = 0.07
    freeze_layers: int = 0
    layer_decay: float = 0.65
    optimizer: AdamWConfig = field(default_factory=lambda: AdamWConfig(weight_decay=0.05))
    eval_every: int = 50


def init_align_params(cfg: AlignConfig, rng, dtype=np.float64):
    """Towers for both modalities, per-modality projection heads, and the
    shared temperature. The two en-face modalities share one tower and get
    separate heads."""
    params = {}
    params.update(init_tower_params(cfg.volume_tower, rng, "vol/", dtype=dtype))
    params.update(init_tower_params(cfg.enface_tower, rng, "enf/", dtype=dtype))
    dim = cfg.volume_tower.vit.dim
    if cfg.enface_tower.vit.dim != dim:
        raise UsageError("towers must share an embedding dim for cosine alignment")
    params.update(init_projection_params(dim, rng, "head_oct/", dtype=dtype))
    params.update(init_projection_params(dim, rng, "head_ir/", dtype=dtype))
    if cfg.trimodal:
        params.update(init_projection_params(dim, rng, "head_faf/", dtype=dtype))
    temp = Temperature.create(cfg.tau_init, dtype=dtype)
    params["log_tau"] = temp.log_tau
    return params


def batch_embeddings(items, cfg: AlignConfig, params, which):
    """Stack per-item projected embeddings into an (N, dim) tensor."""
    rows = []
    for item in items:
        if which == "oct":
            rows.append(tower_embed(item, cfg.volume_tower, params, "vol/"))
        else:
            rows.append(tower_embed(as_volume(item), cfg.enface_tower, params, "enf/"))
    stacked = rows[0] if len(rows) == 1 else T.concat_rows(rows)
    head = {"oct": "head_oct/", "ir": "head_ir/", "faf": "head_faf/"}[which]
    return projection_head(stacked, params, head)


def train_recall_at_1(volumes, enfaces, cfg, params):
    """Fraction of volumes whose top-1 cosine match is their own pair."""
    o = batch_embeddings(volumes, cfg, params, "oct").data
    i = batch_embeddings(enfaces, cfg, params, "ir").data
    o = o / np.linalg.norm(o, axis=1, keepdims=True)
    i = i / np.linalg.norm(i, axis=1, keepdims=True)
    sims = o @ i.T
    return float(np.mean(sims.argmax(axis=1) == np.arange(len(volumes))))


def _align_lr(step, cfg: AlignConfig):
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def align_train(volumes, enfaces, cfg: AlignConfig, seed=0, faf=None, params=None):
    """Minimize the (tri-)modal InfoNCE over matched items.

    Returns (params, log lines). Layer freezing applies to the volume
    tower only; frozen parameters are never touched by the optimizer, so
    their values stay bit-identical.
    """
    if len(volumes) != len(enfaces):
        raise UsageError("volumes and en-face images must pair one-to-one")
    if cfg.trimodal and (faf is None or len(faf) != len(volumes)):
        raise UsageError("trimodal training needs a matched third modality")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_align_params(cfg, rng)
    temp = Temperature(params["log_tau"])

    scales = {}
    for name in params:
        if name.startswith("vol/"):
            scales[name] = lr_scale_for_param(
                name, cfg.volume_tower.vit.depth, cfg.layer_decay, cfg.freeze_layers
            )
        else:
            scales[name] = 1.0
    optimizer = AdamW(params, cfg.optimizer, lr_scales=scales)

    n = len(volumes)
    log = []
    for step in range(cfg.steps):
        batch = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        o = batch_embeddings([volumes[j] for j in batch], cfg, params, "oct")
        i = batch_embeddings([enfaces[j] for j in batch], cfg, params, "ir")
        tau = temp.value()
        if cfg.trimodal:
            e = batch_embeddings([faf[j] for j in batch], cfg, params, "faf")
            loss = trimodal_infonce(o, i, e, tau)
        else:
            loss = symmetric_infonce(o, i, tau)
        if not np.isfinite(loss.data):
            raise NumericError(f"alignment diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(_align_lr(step, cfg))
        temp.clamp()
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            r1 = train_recall_at_1(volumes, enfaces, cfg, params)
            log.append(
                f"step {step} loss {float(loss.data):.6f} "
                f"tau {float(temp.value().data):.4f} recall@1 {r1:.4f}"
            )
        else:
            log.append(f"step {step} loss {float(loss.data):.6f}")
    return params, log
