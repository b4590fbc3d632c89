"""Classification, regression, retrieval, and image-similarity metrics.

Everything is a pure function over numpy arrays. Ranking ties break by
candidate index (stable sort) and ranks are 1-based, so a perfect
retrieval has mean rank exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DegenerateInputError, UsageError


# -- classification ------------------------------------------------------------


def _check_binary(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise UsageError("labels must be 0/1")
    return labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UsageError("auroc needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auprc(scores, labels) -> float:
    """Step-wise average precision over descending-score thresholds:
    sum_i (R_i - R_{i-1}) * P_i."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UsageError("auprc needs at least one positive")
    # Descending scores; ties handled by thresholding on distinct values.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    taken = np.arange(1, labels.size + 1)
    # Threshold boundaries: last index of each distinct score value.
    boundary = np.flatnonzero(
        np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    )
    precision = tp[boundary] / taken[boundary]
    recall = tp[boundary] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def balanced_accuracy(predicted, labels) -> float:
    """(sensitivity + specificity) / 2."""
    predicted = _check_binary(predicted)
    labels = _check_binary(labels)
    if labels.min() == labels.max():
        raise UsageError("balanced accuracy needs both classes in labels")
    sens = float((predicted[labels == 1] == 1).mean())
    spec = float((predicted[labels == 0] == 0).mean())
    return 0.5 * (sens + spec)


def macro_scores(score_matrix, label_matrix, metric):
    """Column-wise macro average of a binary metric over label columns."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape:
        raise UsageError("score and label matrices must align")
    values = [metric(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    return float(np.mean(values))


# -- regression ------------------------------------------------------------------


def pearson_r2(pred, gt) -> float:
    """Squared sample Pearson correlation."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size != gt.size or pred.size < 2:
        raise UsageError("pearson_r2 needs two equal-length sequences, n >= 2")
    if np.ptp(pred) == 0 or np.ptp(gt) == 0:
        raise DegenerateInputError("constant input has undefined correlation")
    pc = pred - pred.mean()
    gc = gt - gt.mean()
    r = (pc * gc).sum() / np.sqrt((pc * pc).sum() * (gc * gc).sum())
    return float(r * r)


def coefficient_of_determination(pred, gt) -> float:
    """Classical R^2 = 1 - SS_res / SS_tot (can be negative)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size != gt.size or pred.size < 2:
        raise UsageError("needs two equal-length sequences, n >= 2")
    ss_tot = ((gt - gt.mean()) ** 2).sum()
    if ss_tot == 0:
        raise DegenerateInputError("constant ground truth")
    return float(1.0 - ((gt - pred) ** 2).sum() / ss_tot)


# -- retrieval --------------------------------------------------------------------


@dataclass
class SimilarityMatrix:
    """T x T cross-modal similarity with the true pair on the diagonal."""

    values: np.ndarray
    lateralities: list = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise UsageError(f"similarity matrix must be square, got {self.values.shape}")

    @property
    def size(self):
        return self.values.shape[0]


def _true_pair_ranks(values):
    """1-based rank of the diagonal entry per row; ties broken by index."""
    t = values.shape[0]
    ranks = np.empty(t, dtype=np.int64)
    for j in range(t):
        order = np.argsort(-values[j], kind="stable")
        ranks[j] = int(np.flatnonzero(order == j)[0]) + 1
    return ranks


def retrieval_metrics(sim: SimilarityMatrix, ks=(1, 5, 10)):
    """Recall@K and mean rank, rows (A -> B) and columns (B -> A)."""
    out = {}
    for direction, values in (("row", sim.values), ("col", sim.values.T)):
        ranks = _true_pair_ranks(values)
        entry = {f"recall@{k}": float((ranks <= k).mean()) for k in ks}
        entry["mean_rank"] = float(ranks.mean())
        out[direction] = entry
    return out


def laterality_accuracy(sim: SimilarityMatrix, lateralities, k) -> float:
    """Among each query's top-K candidates (true pair removed), the
    average fraction sharing the query's laterality."""
    t = sim.size
    lateralities = list(lateralities)
    if len(lateralities) != t:
        raise UsageError("one laterality label per item required")
    if not 1 <= k <= t - 1:
        raise UsageError(f"k must be in [1, T-1] = [1, {t - 1}], got {k}")
    values = sim.values
    total = 0.0
    for j in range(t):
        order = [c for c in np.argsort(-values[j], kind="stable") if c != j]
        top = order[:k]
        total += float(np.mean([lateralities[c] == lateralities[j] for c in top]))
    return total / t


# -- image similarity ----------------------------------------------------------------

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def slice_similarity(a, b, window=None):
    """(RMSE, SSIM) for two equal-shape slices with values in [0, 1].

    SSIM uses the standard stabilizers at unit dynamic range and, by
    default, a single global window (population moments). Pass ``window``
    for a uniform-filter windowed SSIM averaged over positions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"slice shapes differ: {a.shape} vs {b.shape}")
    rmse = float(np.sqrt(((a - b) ** 2).mean()))
    if window is None:
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        ssim = _ssim_formula(mu_a, mu_b, var_a, var_b, cov)
    else:
        mu_a = uniform_filter(a, size=window)
        mu_b = uniform_filter(b, size=window)
        var_a = uniform_filter(a * a, size=window) - mu_a * mu_a
        var_b = uniform_filter(b * b, size=window) - mu_b * mu_b
        cov = uniform_filter(a * b, size=window) - mu_a * mu_b
        ssim = float(np.mean(_ssim_formula(mu_a, mu_b, var_a, var_b, cov)))
    return rmse, float(ssim)


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov):
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
