"""Training objectives: classification, mask (BCE + Dice), cosine alignment
and the two stage composites."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import LossWeights
from .nn import autodiff as ad
from .nn.autodiff import Tensor

DICE_SMOOTH = 1.0


def _check_same_length(logits: Tensor, target: np.ndarray) -> None:
    if logits.data.size != target.size:
        raise ValueError(f"logits ({logits.data.size}) and target ({target.size}) lengths differ")


def cross_entropy_cls(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if len(labels) != n:
        raise ValueError("one label per logit row is required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    picked = ad.log_softmax(logits, axis=-1)[np.arange(n), labels]
    return -ad.mean(picked)


def dice_loss(logits, target) -> Tensor:
    """``1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`` with ``p = sigmoid(logits)``."""
    logits = ad.as_tensor(logits)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    _check_same_length(logits, target)
    p = ad.sigmoid(ad.reshape(logits, (target.size,)))
    inter = ad.sum(p * target)
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (ad.sum(p) + (target.sum() + DICE_SMOOTH))


def bce_loss(logits, target) -> Tensor:
    """Mean logit-space binary cross-entropy: ``softplus(x) - t x``."""
    logits = ad.as_tensor(logits)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    _check_same_length(logits, target)
    x = ad.reshape(logits, (target.size,))
    return ad.mean(ad.softplus(x) - x * target)


def mask_loss(logits, target) -> Tensor:
    return bce_loss(logits, target) + dice_loss(logits, target)


def cosine_alignment_loss(a, b) -> Tensor:
    """Mean over rows of ``1 - cos(a_j, b_j)``; zero-norm rows count as orthogonal."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"cosine loss needs equal 2-D shapes, got {a.shape} and {b.shape}")
    sq_a = ad.sum(ad.square(a), axis=1)
    sq_b = ad.sum(ad.square(b), axis=1)
    degenerate = ((sq_a.data == 0.0) | (sq_b.data == 0.0)).astype(np.float64)
    # pad degenerate rows so sqrt and the division stay differentiable
    norm_a = ad.sqrt(sq_a + degenerate)
    norm_b = ad.sqrt(sq_b + degenerate)
    cos = ad.sum(a * b, axis=1) * (1.0 - degenerate) / (norm_a * norm_b)
    return ad.mean(1.0 - cos)


def stage1_loss(cls_logits, cls_labels, mask_logits, mask_targets,
                features: Sequence, lifted: Sequence, weights: LossWeights) -> Tensor:
    """``L_cls + lambda1 * L_mask + lambda2 * sum_r L_cos(lifted_r, features_r)``.

    ``mask_logits``/``mask_targets`` are pre-matched (query, instance) pairs,
    either a single vector or rows of a matrix.
    """
    total = cross_entropy_cls(cls_logits, cls_labels)
    total = total + weights.lambda1 * mask_loss(ad.reshape(ad.as_tensor(mask_logits), (-1,)),
                                                np.asarray(mask_targets).reshape(-1))
    if len(features) != len(lifted):
        raise ValueError("one lifted reference per feature scale is required")
    for f, fc in zip(features, lifted):
        total = total + weights.lambda2 * cosine_alignment_loss(fc, f)
    return total


def stage2_loss(token_logits, token_targets, mask_logits, mask_targets,
                h_pred, h_gt, weights: LossWeights) -> Tensor:
    """``L_tokens + lambda3 * L_mask + lambda4 * L_cos(h_pred, h_gt)``."""
    total = cross_entropy_cls(token_logits, token_targets)
    total = total + weights.lambda3 * mask_loss(ad.reshape(ad.as_tensor(mask_logits), (-1,)),
                                                np.asarray(mask_targets).reshape(-1))
    return total + weights.lambda4 * cosine_alignment_loss(h_pred, h_gt)
