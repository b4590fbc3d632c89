"""Pooling, prediction heads, training losses, and the slice-level
aggregation baselines."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import UsageError


def pool_tokens(tokens: T.Tensor) -> T.Tensor:
    """Arithmetic mean over the token axis; permutation invariant."""
    if tokens.data.ndim != 2 or tokens.data.shape[0] < 1:
        raise UsageError("pool_tokens expects a non-empty (L, dim) matrix")
    return T.mean(tokens, axis=0)


def smoothed_ce_loss(logits: T.Tensor, labels, epsilon: float) -> T.Tensor:
    """Cross-entropy against (1 - eps) * onehot + eps / C targets.

    ``logits`` is (C,) or (N, C); ``labels`` an int or length-N ints.
    """
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"smoothing factor must be in [0, 1), got {epsilon}")
    single = logits.data.ndim == 1
    mat = T.reshape(logits, (1, -1)) if single else logits
    n, classes = mat.data.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size != n:
        raise UsageError(f"{n} logit rows but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= classes:
        raise UsageError(f"class index outside [0, {classes})")
    targets = np.full((n, classes), epsilon / classes, dtype=mat.data.dtype)
    targets[np.arange(n), labels] += 1.0 - epsilon
    per_item = T.neg(
        T.tensor_sum(T.mul(T.Tensor(targets), T.log_softmax(mat, axis=1)), axis=1)
    )
    return T.mean(per_item)


def smoothed_binary_loss(logits: T.Tensor, labels, epsilon: float) -> T.Tensor:
    """Per-label sigmoid cross-entropy with smoothing, for multi-label
    heads. Computed as 2-way softmax over (logit, 0) pairs for stability.
    """
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"smoothing factor must be in [0, 1), got {epsilon}")
    flat = T.reshape(logits, (-1, 1))
    k = flat.data.shape[0]
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size != k:
        raise UsageError(f"{k} logits but {labels.size} labels")
    pair = T.concat_cols([flat, T.Tensor(np.zeros((k, 1), dtype=flat.data.dtype))])
    pos = (1.0 - epsilon) * labels + epsilon / 2.0
    targets = np.stack([pos, 1.0 - pos], axis=1)
    per_label = T.neg(
        T.tensor_sum(T.mul(T.Tensor(targets), T.log_softmax(pair, axis=1)), axis=1)
    )
    return T.mean(per_label)


def combined_regression_loss(pred, gt, aux_pred, aux_gt) -> T.Tensor:
    """Per-sample (L1 + L2) on the primary target plus 0.1 * (L1 + L2) on
    the auxiliary target, averaged over the batch."""
    pred = pred if isinstance(pred, T.Tensor) else T.Tensor(np.atleast_1d(pred))
    aux_pred = (
        aux_pred if isinstance(aux_pred, T.Tensor) else T.Tensor(np.atleast_1d(aux_pred))
    )
    gt_arr = np.atleast_1d(np.asarray(gt, dtype=np.float64))
    aux_arr = np.atleast_1d(np.asarray(aux_gt, dtype=np.float64))
    d = T.sub(T.reshape(pred, (-1,)), T.Tensor(gt_arr))
    da = T.sub(T.reshape(aux_pred, (-1,)), T.Tensor(aux_arr))
    primary = T.add(T.absolute(d), T.mul(d, d))
    aux = T.add(T.absolute(da), T.mul(da, da))
    return T.mean(T.add(primary, T.mul(aux, 0.1)))


def aggregate_slice_predictions(probabilities, center, k):
    """Mean probability over the window [center-k, center+k], clipped to
    the valid slice range. k = 0 reproduces the center-slice baseline."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.size == 0:
        raise UsageError("empty probability list")
    if not 0 <= center < probs.size:
        raise UsageError(f"center {center} outside [0, {probs.size})")
    if k < 0:
        raise UsageError("window half-width k must be >= 0")
    lo = max(0, center - k)
    hi = min(probs.size, center + k + 1)
    return float(probs[lo:hi].mean())


def multi_instance_embed(volume, slice_encoder):
    """Mean of per-slice embeddings; the center-slice baseline is the same
    path restricted to the single center slice."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[0] < 1:
        raise UsageError("expected a (Z, H, W) volume with Z >= 1")
    embeddings = [np.asarray(slice_encoder(volume[z])).reshape(-1) for z in range(volume.shape[0])]
    return np.mean(np.stack(embeddings, axis=0), axis=0)


def center_slice_embed(volume, slice_encoder):
    volume = np.asarray(volume)
    center = volume.shape[0] // 2
    return np.asarray(slice_encoder(volume[center])).reshape(-1)


def init_head_params(dim, outputs, rng, prefix, std=0.02, dtype=np.float64):
    """Layer-norm + affine head (classification or regression)."""
    return {
        f"{prefix}ln/gain": T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        f"{prefix}ln/bias": T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        f"{prefix}weight": T.Tensor(
            rng.normal(0.0, std, size=(dim, outputs)).astype(dtype), requires_grad=True
        ),
        f"{prefix}bias": T.Tensor(np.zeros(outputs, dtype=dtype), requires_grad=True),
    }


def head_forward(x: T.Tensor, params, prefix, dropout_rate=0.5, train=False, rng=None,
                 eps=1e-6) -> T.Tensor:
    """LN -> dropout (train only) -> affine. Eval mode is deterministic."""
    normed = T.layer_norm(x, params[f"{prefix}ln/gain"], params[f"{prefix}ln/bias"], eps)
    dropped = T.dropout(normed, dropout_rate, rng=rng, train=train)
    return T.add(T.matmul(dropped, params[f"{prefix}weight"]), params[f"{prefix}bias"])
