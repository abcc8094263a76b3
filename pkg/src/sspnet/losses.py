"""Attention, detection and joint losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

PROB_CLIP = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    alpha: float = 0.01  # BCE term of the attention loss
    beta: float = 1.0    # dice term of the attention loss
    mu1: float = 1.0
    mu2: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "mu1", "mu2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _target(a: Tensor, s) -> np.ndarray:
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    if s.shape != a.shape:
        if s.size == a.size:
            s = s.reshape(a.shape)
        else:
            raise DimensionError(f"prediction {a.shape} and target {s.shape} differ")
    return s


def dice_loss(a: Tensor, s) -> Tensor:
    """``1 - (2*sum(A*S) + 1) / (sum(A^2) + sum(S^2) + 1)``."""
    s = _target(a, s)
    inter = T.tsum(T.mul(a, Tensor(s)))
    denom = T.tsum(T.square(a)) + float((s * s).sum()) + DICE_SMOOTH
    return 1.0 - T.div(2.0 * inter + DICE_SMOOTH, denom)


def bce_map(a: Tensor, s) -> Tensor:
    s = _target(a, s)
    ac = T.clip(a, PROB_CLIP, 1.0 - PROB_CLIP)
    pos = T.mul(T.log(ac), Tensor(s))
    neg = T.mul(T.log(1.0 - ac), Tensor(1.0 - s))
    return -(pos + neg)


def ohem_mask(cell_loss: np.ndarray, s: np.ndarray, neg_ratio: int = 3,
              empty_fraction: float = 0.0025) -> np.ndarray:
    """Keep every positive plus the ``neg_ratio * n_pos`` hardest negatives."""
    flat_loss = cell_loss.reshape(-1)
    flat_s = s.reshape(-1)
    keep = flat_s > 0.5
    n_pos = int(keep.sum())
    neg_idx = np.flatnonzero(~keep)
    n_neg = neg_ratio * n_pos if n_pos else max(1, int(empty_fraction * flat_s.size))
    n_neg = min(n_neg, neg_idx.size)
    if n_neg:
        # stable: equal losses resolve to the lower cell index
        order = np.argsort(-flat_loss[neg_idx], kind="stable")
        keep = keep.copy()
        keep[neg_idx[order[:n_neg]]] = True
    return keep.reshape(s.shape)


def bce_ohem_loss(a: Tensor, s, neg_ratio: int = 3) -> Tensor:
    s = _target(a, s)
    per_cell = bce_map(a, s)
    mask = ohem_mask(per_cell.data, s, neg_ratio)
    return T.tsum(T.mul(per_cell, Tensor(mask.astype(np.float64)))) / float(mask.sum())


def attention_loss(attention: dict[int, Tensor], targets: dict[int, np.ndarray],
                   weights: LossWeights | None = None) -> Tensor:
    """Sum over levels of ``alpha * BCE-OHEM + beta * dice``."""
    w = weights or LossWeights()
    if set(attention) != set(targets):
        raise DimensionError(f"attention levels {sorted(attention)} vs targets {sorted(targets)}")
    total = Tensor(0.0)
    for k in sorted(attention):
        a = attention[k]
        if w.alpha:
            total = total + w.alpha * bce_ohem_loss(a, targets[k])
        if w.beta:
            total = total + w.beta * dice_loss(a, targets[k])
    return total


def smooth_l1(pred: Tensor, target) -> Tensor:
    d = T.sub(pred, Tensor(_target(pred, target)))
    small = (np.abs(d.data) < 1.0).astype(np.float64)
    quad = T.mul(T.square(d), Tensor(0.5 * small))
    lin = T.mul(T.tabs(d) - 0.5, Tensor(1.0 - small))
    return T.mean(quad + lin)


def smooth_l1_sum(pred: Tensor, target) -> Tensor:
    return smooth_l1(pred, target) * float(pred.size)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over ``logits``."""
    y = _target(logits, labels)
    return T.mean(T.softplus(logits) - T.mul(logits, Tensor(y)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean multi-class cross-entropy, ``logits`` of shape (n, classes)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"cross_entropy: logits {logits.shape}, {labels.size} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -T.tsum(T.mul(T.log_softmax(logits, axis=1), Tensor(onehot))) / float(labels.size)


@dataclass
class DetectionTargets:
    """Sampled training targets for both stages.

    ``rpn_labels`` / ``head_labels`` are 0/1 per sample; the regression
    targets are (n, 4) deltas, only rows flagged positive contribute.
    """

    rpn_labels: np.ndarray
    rpn_reg: np.ndarray
    head_labels: np.ndarray
    head_reg: np.ndarray


def _regression(pred: Tensor, target: np.ndarray, positive: np.ndarray) -> Tensor:
    n_reg = max(1, int(positive.sum()))
    if not positive.any():
        return Tensor(0.0)
    idx = np.flatnonzero(positive)
    return smooth_l1_sum(T.index(pred, idx), target[idx]) / float(n_reg)


def detection_losses(rpn_cls: Tensor, rpn_reg: Tensor, head_cls: Tensor, head_reg: Tensor,
                     targets: DetectionTargets, weights: LossWeights | None = None) -> tuple[Tensor, Tensor]:
    """Two-stage losses: objectness BCE + box smooth-L1, then 2-class CE + box smooth-L1.

    Classification terms are averaged over the sampled entries; regression
    terms are summed over positives and divided by their count (at least 1).
    """
    w = weights or LossWeights()
    rpn_pos = np.asarray(targets.rpn_labels).reshape(-1) > 0.5
    head_pos = np.asarray(targets.head_labels).reshape(-1) > 0.5
    l_rpn = bce_with_logits(rpn_cls.reshape(-1), targets.rpn_labels)
    if w.mu1:
        l_rpn = l_rpn + w.mu1 * _regression(rpn_reg, np.asarray(targets.rpn_reg), rpn_pos)
    if head_cls.shape[0]:
        l_head = cross_entropy(head_cls, head_pos.astype(np.int64))
        if w.mu2:
            l_head = l_head + w.mu2 * _regression(head_reg, np.asarray(targets.head_reg), head_pos)
    else:
        l_head = Tensor(0.0)
    return l_rpn, l_head


def joint_loss(l_rpn, l_head, l_att) -> Tensor:
    return T.as_tensor(l_rpn) + T.as_tensor(l_head) + T.as_tensor(l_att)
