"""Training objective: weighted cross-entropy, Lovasz softmax surrogate of the
Jaccard loss, and the neighborhood smoothness regularizer."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import (Tensor, absolute, add, constant, gather_rows, log_softmax,
                     mul, reshape, softmax_rows, sub, sum_all, sum_axis,
                     take_per_row)
from .voxel import NeighborList

__all__ = ["LossConfig", "weighted_ce", "lovasz_softmax", "smoothness_reg",
           "total_loss", "one_hot", "class_weights_from_counts"]


@dataclass
class LossConfig:
    class_weights: np.ndarray          # (C,), positive
    beta_wce: float = 1.0
    beta_ls: float = 2.0
    beta_reg: float = 500.0
    ignore_id: int | None = None
    reg_neighbors: int = 32

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if (self.class_weights <= 0).any():
            raise ValueError("class weights must be positive")
        if min(self.beta_wce, self.beta_ls, self.beta_reg) < 0:
            raise ValueError("loss weights must be nonnegative")

    @staticmethod
    def uniform(num_classes: int, **kw) -> "LossConfig":
        return LossConfig(class_weights=np.ones(num_classes), **kw)


def class_weights_from_counts(counts: np.ndarray, clamp=(0.1, 10.0)) -> np.ndarray:
    """Inverse-frequency weights, normalized to mean 1, clamped."""
    counts = np.asarray(counts, dtype=np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    w = inv / inv.mean()
    return np.clip(w, clamp[0], clamp[1])


def one_hot(labels: np.ndarray, num_classes: int,
            ignore_id: int | None = None) -> np.ndarray:
    """Rows are one-hot, or all-zero for ignored labels."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    valid = labels != ignore_id if ignore_id is not None else np.ones(len(labels), bool)
    valid &= (labels >= 0) & (labels < num_classes)
    out[np.flatnonzero(valid), labels[valid]] = 1.0
    return out


def _valid_mask(labels: np.ndarray, config: LossConfig) -> np.ndarray:
    if config.ignore_id is None:
        return np.ones(len(labels), dtype=bool)
    return labels != config.ignore_id


def weighted_ce(logits: Tensor, labels: np.ndarray, config: LossConfig) -> Tensor:
    """Mean over non-ignored points of -w_y * log p_y."""
    labels = np.asarray(labels, dtype=np.int64)
    valid = _valid_mask(labels, config)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("weighted cross-entropy: every point is ignored")
    logp = log_softmax(logits)
    safe_labels = np.where(valid, labels, 0)
    picked = take_per_row(logp, safe_labels)
    w = (config.class_weights[safe_labels] * valid).astype(logits.data.dtype)
    return mul(sum_all(mul(picked, constant(w[:, None]))), -1.0 / n_valid)


def _lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard set loss along a sorted error vector."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax(probs: Tensor, labels: np.ndarray, config: LossConfig) -> Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over the
    classes present in the (non-ignored) ground truth."""
    labels = np.asarray(labels, dtype=np.int64)
    valid = _valid_mask(labels, config)
    idx_valid = np.flatnonzero(valid)
    if len(idx_valid) == 0:
        return constant(np.zeros(()))
    present = np.unique(labels[idx_valid])
    num_classes = probs.data.shape[1]
    class_losses = []
    for c in present:
        fg = (labels[idx_valid] == c).astype(np.float64)
        col = take_per_row(gather_rows(probs, idx_valid),
                           np.full(len(idx_valid), c, dtype=np.int64))
        # errors: 1 - p on foreground, p on background == fg + (1 - 2 fg) * p
        errors = add(constant(fg[:, None]),
                     mul(col, constant((1.0 - 2.0 * fg)[:, None])))
        order = np.argsort(-errors.data.ravel(), kind="stable")
        coeffs = _lovasz_grad(fg[order])
        sorted_err = gather_rows(errors, order)
        class_losses.append(sum_all(mul(sorted_err,
                                        constant(coeffs[:, None].astype(probs.data.dtype)))))
    total = class_losses[0]
    for cl in class_losses[1:]:
        total = add(total, cl)
    return mul(total, 1.0 / len(class_losses))


def _variation(rows: Tensor, neighbors: NeighborList) -> Tensor:
    """Mean absolute difference to the neighbors, per point and class."""
    n, k = neighbors.indices.shape
    acc = None
    for s in range(k):
        idx = neighbors.indices[:, s]
        diff = absolute(sub(rows, gather_rows(rows, idx)))
        if (idx < 0).any():
            diff = mul(diff, constant((idx >= 0).astype(rows.data.dtype)[:, None]))
        acc = diff if acc is None else add(acc, diff)
    denom = np.maximum(neighbors.counts, 1).astype(rows.data.dtype)
    return mul(acc, constant(1.0 / denom[:, None]))


def smoothness_reg(probs: Tensor, labels: np.ndarray, neighbors: NeighborList,
                   config: LossConfig) -> Tensor:
    """Penalty on the mismatch between predicted and ground-truth local
    variation: (1/N) sum_i || var(Y, i) - var(Yhat, i) ||_1 over classes."""
    n, num_classes = probs.data.shape
    if n < 2:
        return constant(np.zeros(()))
    y = one_hot(labels, num_classes, config.ignore_id)
    var_true = _variation(constant(y.astype(probs.data.dtype)), neighbors)
    var_pred = _variation(probs, neighbors)
    gap = sum_axis(absolute(sub(var_true, var_pred)), 1)
    return mul(sum_all(gap), 1.0 / n)


def _segmentation_loss(logits: Tensor, labels: np.ndarray,
                       neighbors: NeighborList | None, config: LossConfig) -> Tensor:
    total = constant(np.zeros(()))
    if config.beta_wce > 0:
        total = add(total, mul(weighted_ce(logits, labels, config), config.beta_wce))
    if config.beta_ls > 0 or config.beta_reg > 0:
        probs = softmax_rows(logits)
        if config.beta_ls > 0:
            total = add(total, mul(lovasz_softmax(probs, labels, config), config.beta_ls))
        if config.beta_reg > 0 and neighbors is not None:
            total = add(total, mul(smoothness_reg(probs, labels, neighbors, config),
                                   config.beta_reg))
    return total


def _final_labels(labels: np.ndarray, moving_flags: np.ndarray,
                  movable_classes, num_classes: int,
                  ignore_id: int | None) -> np.ndarray:
    movable = sorted(movable_classes)
    rank = {c: i for i, c in enumerate(movable)}
    out = labels.copy()
    for c in movable:
        sel = (labels == c) & moving_flags
        out[sel] = num_classes + rank[c]
    if ignore_id is not None:
        out[labels == ignore_id] = num_classes + len(movable)  # stays ignored
    return out


def total_loss(sem_logits: Tensor, motion_logits: Tensor | None,
               labels: np.ndarray, moving_flags: np.ndarray | None,
               config: LossConfig, neighbors: NeighborList | None = None,
               movable_classes=(), final_logits: Tensor | None = None) -> Tensor:
    """Weighted sum of the three loss terms.

    Without a motion header this is the segmentation loss on the semantic
    logits. With one, the same combination is applied at the motion, semantic
    and final logit levels and averaged.
    """
    labels = np.asarray(labels, dtype=np.int64)
    sem = _segmentation_loss(sem_logits, labels, neighbors, config)
    if not movable_classes or motion_logits is None or final_logits is None:
        return sem

    movable_mask = np.isin(labels, list(movable_classes))
    motion_labels = np.where(movable_mask,
                             moving_flags.astype(np.int64), -1)
    motion_config = replace(config, class_weights=np.ones(2), ignore_id=-1)
    motion = _segmentation_loss(motion_logits, motion_labels, neighbors, motion_config)

    num_classes = len(config.class_weights)
    movable = sorted(movable_classes)
    final_weights = np.concatenate([config.class_weights,
                                    config.class_weights[movable]])
    fin_ignore = None
    fin_labels = _final_labels(labels, moving_flags, movable, num_classes,
                               config.ignore_id)
    if config.ignore_id is not None:
        fin_ignore = num_classes + len(movable)
    final_config = replace(config, class_weights=final_weights, ignore_id=fin_ignore)
    final = _segmentation_loss(final_logits, fin_labels, neighbors, final_config)
    return mul(add(add(sem, motion), final), 1.0 / 3.0)
