"""Supervised fine-tuning of an encoder tower with a prediction head.

Classification uses label-smoothed cross-entropy; regression uses the
combined L1 + L2 loss with a 0.1-weighted auxiliary target. Training
applies a layer-wise learning-rate plan, linear warmup over the first
epoch(s), cosine annealing afterwards, and selects the epoch with the
best validation AUPRC (classification) or R-squared (regression).
A k-fold helper trains one model per fold and ensembles by averaging
predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import metrics
from .errors import NumericError, UsageError
from .heads import combined_regression_loss, head_forward, init_head_params, smoothed_ce_loss
from .optim import AdamW, AdamWConfig, ScheduleConfig, lr_schedule, lr_scale_for_param
from .towers import TowerConfig, init_tower_params, tower_embed


@dataclass
class FinetuneRecipe:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 1
    layer_decay: float = 0.65
    freeze_layers: int = 0
    warmup_epochs: int = 1
    label_smoothing: float = 0.1
    dropout: float = 0.5
    weight_decay: float = 0.05
    val_fraction: float = 0.25
    floor_lr: float = 0.0


@dataclass
class FinetunedModel:
    tower: TowerConfig
    params: dict
    task: str
    classes: int = 2
    dropout: float = 0.5
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("nan")

    def _embed(self, volume):
        return tower_embed(volume, self.tower, self.params, "vol/")

    def predict_logits(self, volumes):
        rows = [
            head_forward(self._embed(v), self.params, "head/", self.dropout, train=False).data[0]
            for v in volumes
        ]
        return np.stack(rows, axis=0)

    def predict_proba(self, volumes):
        """Eval-mode class probabilities (N, C); deterministic."""
        if self.task != "classification":
            raise UsageError("predict_proba is for classification models")
        logits = self.predict_logits(volumes)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, volumes):
        """Class labels (classification) or primary-target values."""
        if self.task == "classification":
            return self.predict_proba(volumes).argmax(axis=1)
        return self.predict_logits(volumes)[:, 0]

    def predict_with_auxiliary(self, volumes):
        if self.task != "regression":
            raise UsageError("auxiliary output exists on regression models")
        out = self.predict_logits(volumes)
        return out[:, 0], out[:, 1]


def _split_train_val(n, val_fraction, rng):
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _score_classification(model, volumes, labels, prefer="auprc"):
    probs = model.predict_proba(volumes)
    if model.classes == 2:
        scores = probs[:, 1]
        return metrics.auroc(scores, labels), metrics.auprc(scores, labels)
    onehot = np.eye(model.classes, dtype=np.int64)[np.asarray(labels)]
    return (
        metrics.macro_scores(probs, onehot, metrics.auroc),
        metrics.macro_scores(probs, onehot, metrics.auprc),
    )


def finetune(volumes, targets, tower_cfg: TowerConfig, recipe: FinetuneRecipe,
             seed=0, task="classification", init_params=None, r2_kind="pearson",
             split=None):
    """Train a tower + head on labeled volumes; returns a FinetunedModel.

    ``targets`` is an int label array for classification, or a
    (primary, auxiliary) pair of float arrays for regression. ``split``
    optionally fixes (train_idx, val_idx) instead of the seeded random
    val_fraction split.
    """
    if task not in ("classification", "regression"):
        raise UsageError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    n = len(volumes)

    if task == "classification":
        labels = np.asarray(targets, dtype=np.int64)
        if labels.size != n:
            raise UsageError("one label per volume required")
        if np.unique(labels).size < 2:
            raise UsageError("training labels contain a single class")
        classes = int(labels.max()) + 1
    else:
        primary = np.asarray(targets[0], dtype=np.float64)
        aux = np.asarray(targets[1], dtype=np.float64)
        if primary.size != n or aux.size != n:
            raise UsageError("regression targets must pair with every volume")
        classes = 2  # primary + auxiliary outputs

    if init_params:
        # Fresh copies so repeated runs (k-fold) share the same start point.
        params = {
            k: T.Tensor(v.data.copy(), requires_grad=True)
            for k, v in init_params.items()
        }
    else:
        params = init_tower_params(tower_cfg, rng, "vol/")
    params.update(init_head_params(tower_cfg.vit.dim, classes, rng, "head/"))

    scales = {
        name: (
            lr_scale_for_param(name, tower_cfg.vit.depth, recipe.layer_decay, recipe.freeze_layers)
            if name.startswith("vol/")
            else 1.0
        )
        for name in params
    }
    optimizer = AdamW(params, AdamWConfig(weight_decay=recipe.weight_decay), lr_scales=scales)
    schedule = ScheduleConfig(
        peak_lr=recipe.lr,
        warmup_epochs=recipe.warmup_epochs,
        total_epochs=recipe.epochs,
        floor_lr=recipe.floor_lr,
    )

    if split is not None:
        train_idx = np.asarray(split[0], dtype=np.int64)
        val_idx = np.asarray(split[1], dtype=np.int64)
    else:
        train_idx, val_idx = _split_train_val(n, recipe.val_fraction, rng)
    if task == "classification" and np.unique(labels[train_idx]).size < 2:
        raise UsageError("training split lost a class; adjust val_fraction or seed")
    steps_per_epoch = max(1, train_idx.size // recipe.batch_size)

    model = FinetunedModel(
        tower=tower_cfg, params=params, task=task, classes=classes, dropout=recipe.dropout
    )
    best = None
    step = 0
    for epoch in range(recipe.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for b in range(steps_per_epoch):
            batch = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            if batch.size == 0:
                continue
            optimizer.zero_grad()
            losses = []
            for idx in batch:
                emb = tower_embed(volumes[idx], tower_cfg, params, "vol/")
                out = head_forward(
                    emb, params, "head/", recipe.dropout, train=True, rng=rng
                )
                if task == "classification":
                    losses.append(
                        smoothed_ce_loss(out, labels[idx], recipe.label_smoothing)
                    )
                else:
                    losses.append(
                        combined_regression_loss(
                            T.slice_cols(out, 0, 1),
                            primary[idx],
                            T.slice_cols(out, 1, 2),
                            aux[idx],
                        )
                    )
            total = losses[0]
            for extra in losses[1:]:
                total = T.add(total, extra)
            total = T.div(total, float(batch.size))
            if not np.isfinite(total.data):
                raise NumericError(f"fine-tuning diverged at step {step}")
            total.backward()
            optimizer.step(lr_schedule(step, schedule, steps_per_epoch))
            step += 1

        for split_name, idx in (("train", train_idx), ("val", val_idx)):
            if idx.size == 0:
                continue
            subset = [volumes[i] for i in idx]
            if task == "classification":
                try:
                    roc, prc = _score_classification(model, subset, labels[idx])
                except UsageError:
                    continue  # split holds a single class; nothing to score
                model.log.append(
                    f"epoch {epoch} split {split_name} auroc {roc:.6f} auprc {prc:.6f}"
                )
                if split_name == "val" and (best is None or prc > best[1]):
                    best = (epoch, prc, {k: v.data.copy() for k, v in params.items()})
            else:
                pred = model.predict(subset)
                truth = primary[idx]
                r2 = (
                    metrics.pearson_r2(pred, truth)
                    if r2_kind == "pearson"
                    else metrics.coefficient_of_determination(pred, truth)
                )
                model.log.append(f"epoch {epoch} split {split_name} r2 {r2:.6f}")
                if split_name == "val" and (best is None or r2 > best[1]):
                    best = (epoch, r2, {k: v.data.copy() for k, v in params.items()})

    if best is not None:
        model.best_epoch, model.best_metric, best_data = best
        for name, data in best_data.items():
            params[name].data = data
    return model


def kfold_finetune(volumes, targets, tower_cfg, recipe, seed=0, folds=5,
                   task="classification", init_params=None):
    """Train one model per fold (that fold serving as validation for model
    selection) and return the list of selected models."""
    n = len(volumes)
    if folds < 2 or folds > n:
        raise UsageError(f"folds must be in [2, {n}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_ids = np.array_split(order, folds)
    models = []
    for f, val_idx in enumerate(fold_ids):
        val_mask = np.zeros(n, dtype=bool)
        val_mask[val_idx] = True
        models.append(
            finetune(
                volumes,
                targets,
                tower_cfg,
                recipe,
                seed=seed + 1000 + f,
                task=task,
                init_params=init_params,
                split=(np.flatnonzero(~val_mask), np.sort(val_idx)),
            )
        )
    return models


def ensemble_predict(models, volumes):
    """Mean of the per-model predictions (probabilities or values)."""
    if not models:
        raise UsageError("empty ensemble")
    if models[0].task == "classification":
        return np.mean([m.predict_proba(volumes) for m in models], axis=0)
    return np.mean([m.predict(volumes) for m in models], axis=0)
