from __future__ import annotations

import numpy as np

from .tensor import Tensor, clamp_min, log_softmax, mul, neg, sum_


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Class-weighted softmax cross-entropy, normalised by the applied weights.

    Returns ``sum_b w[y_b] * -log softmax(logits_b)[y_b] / sum_b w[y_b]`` so
    the loss scale does not depend on how imbalanced the batch is.
    """
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    B, K = logits.shape
    if weights.shape != (K,):
        raise ValueError(f"weighted_cross_entropy: expected {K} weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
        raise ValueError("weighted_cross_entropy: weights must be strictly positive and finite")
    if labels.shape != (B,):
        raise ValueError(f"weighted_cross_entropy: labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"weighted_cross_entropy: labels must lie in [0, {K})")
    applied = weights[labels]
    mask = np.zeros((B, K))
    mask[np.arange(B), labels] = applied / applied.sum()
    return neg(sum_(mul(log_softmax(logits), mask)))


def soft_cross_entropy(logits: Tensor, targets, floor: float = 1e-12) -> Tensor:
    """Batch-mean ``-sum_k y_k log p_k`` against soft targets, with p floored."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"soft_cross_entropy: shapes {logits.shape} and {targets.shape} differ")
    logp = clamp_min(log_softmax(logits), float(np.log(floor)))
    return neg(sum_(mul(logp, targets / logits.shape[0])))
