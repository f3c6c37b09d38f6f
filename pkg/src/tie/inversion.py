"""Generator training against a frozen classifier with soft conditioning vectors."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    backward, clamp_min, frozen, log_softmax, mean, mul, neg, reset_tape, sqrt, square, sub, sum_,
)
from .diffcore import adam_step
from .diffcore.tensor import Tensor, _softmax_np, div
from .models import ClassifierNet, GeneratorNet, classifier_forward, generate, generator_forward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12
MAX_RETRIES = 100


@dataclass
class ConditionSample:
    """A batch of conditioning draws: raw Gaussian ``v``, ``softmax(v)`` and its argmax."""

    v: np.ndarray
    y_tilde: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.v)


def conditions_from_raw(v) -> ConditionSample:
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    return ConditionSample(v, _softmax_np(v), v.argmax(axis=1))


def sample_conditions(K: int, B: int, rng: np.random.Generator) -> ConditionSample:
    if K < 2 or B < 1:
        raise ValueError(f"sample_conditions: need K >= 2 and B >= 1, got K={K}, B={B}")
    return conditions_from_raw(rng.standard_normal((B, K)))


def entropy(y) -> np.ndarray | float:
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.where(y > 0, y * np.log(y), 0.0).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_term(y_tilde, p) -> np.ndarray | float:
    """KL(y_tilde || p) with 0 log 0 = 0 and p floored at 1e-12."""
    y = np.asarray(y_tilde, dtype=np.float64)
    logp = np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(y > 0, y * (np.log(y) - logp), 0.0).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def ce_term(y_tilde, p) -> np.ndarray | float:
    y = np.asarray(y_tilde, dtype=np.float64)
    logp = np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))
    out = -(y * logp).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def cosine_diversity(features) -> float:
    """Mean of ``1 - cos(h_i, h_j)`` over ordered pairs ``i != j``; lies in [0, 2]."""
    h = np.asarray(features, dtype=np.float64)
    N = len(h)
    if N < 2:
        raise ValueError("cosine_diversity: need at least 2 rows")
    hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_FLOOR)
    s = hn.sum(axis=0)
    off_diag = s @ s - (hn * hn).sum()
    return float(1.0 - off_diag / (N * (N - 1)))


def cosine_diversity_tensor(h: Tensor) -> Tensor:
    """Differentiable :func:`cosine_diversity`.

    Uses ``sum_{i != j} cos_ij = |sum_i u_i|^2 - sum_i |u_i|^2`` for unit rows
    ``u_i``, which avoids forming the N x N similarity matrix.
    """
    N = h.shape[0]
    if N < 2:
        raise ValueError("cosine_diversity: need at least 2 rows")
    norms = clamp_min(sqrt(sum_(square(h), axis=1, keepdims=True) + 1e-300), NORM_FLOOR)
    u = div(h, norms)
    s = sum_(u, axis=0)
    off_diag = sub(sum_(square(s)), sum_(square(u)))
    return 1.0 - off_diag * (1.0 / (N * (N - 1)))


@dataclass
class InversionLossParts:
    kl: float
    ce: float
    cosine: float
    total: float
    alpha: float
    beta: float
    gamma: float
    sign_mode: int = -1
    stepped: bool = True


def inversion_step(gen: GeneratorNet, clf: ClassifierNet, B: int, alpha: float, beta: float,
                   gamma: float, sign_mode: int, lr: float, rng: np.random.Generator) -> InversionLossParts:
    """One Adam step on the generator minimising ``a*KL + b*CE + sign*g*diversity``.

    ``sign_mode=-1`` rewards spread-out classifier features of the generated
    batch; ``+1`` applies the diversity term with a positive sign. The
    classifier only provides gradients and is never updated. A non-finite
    loss leaves the generator untouched and returns ``stepped=False``.
    """
    if sign_mode not in (-1, 1):
        raise ValueError("sign_mode must be -1 or +1")
    K = clf.num_outputs
    cond = sample_conditions(K, B, rng)
    z = rng.standard_normal((B, gen.latent_dim))
    reset_tape()
    x_hat = generator_forward(gen, z, cond.y_tilde)
    with frozen(clf.parameters()):
        logits, feats = classifier_forward(clf, x_hat)
        logp = clamp_min(log_softmax(logits), float(np.log(PROB_FLOOR)))
        ce_t = neg(sum_(mul(logp, cond.y_tilde / B)))
        # KL differs from CE by the target entropy, a constant w.r.t. the generator
        h_y = float(entropy(cond.y_tilde).mean())
        kl_t = ce_t - h_y
        cos_t = cosine_diversity_tensor(feats)
        total_t = kl_t * alpha + ce_t * beta + cos_t * (sign_mode * gamma)
    p = _softmax_np(logits.data)
    kl = float(np.mean(kl_term(cond.y_tilde, p)))
    ce = float(np.mean(ce_term(cond.y_tilde, p)))
    cos = cosine_diversity(feats.data)
    total = alpha * kl + beta * ce + sign_mode * gamma * cos
    if not np.isfinite(total) or not np.isfinite(total_t.item()):
        reset_tape()
        log.warning("inversion_step: non-finite loss (kl=%s ce=%s cos=%s); generator left unchanged", kl, ce, cos)
        return InversionLossParts(kl, ce, cos, total, alpha, beta, gamma, sign_mode, stepped=False)
    params = gen.parameters()
    for prm in params:
        prm.grad = None
    backward(total_t)
    if not all(np.all(np.isfinite(prm.grad)) for prm in params):
        log.warning("inversion_step: non-finite generator gradient; step skipped")
        for prm in params:
            prm.grad = None
        return InversionLossParts(kl, ce, cos, total, alpha, beta, gamma, sign_mode, stepped=False)
    adam_step(params, lr)
    return InversionLossParts(kl, ce, cos, total, alpha, beta, gamma, sign_mode)


def conditions_for_class(c: int, count: int, K: int, rng: np.random.Generator,
                         max_retries: int = MAX_RETRIES) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` conditioning vectors whose argmax is ``c``.

    Each slot is redrawn until it lands on ``c``; slots still unfilled after
    ``max_retries`` draws fall back to the one-hot vector for ``c``. Returns
    ``(y_tilde, forced_mask)``.
    """
    y = np.zeros((count, K))
    pending = np.arange(count)
    for _ in range(max_retries):
        if pending.size == 0:
            break
        cond = sample_conditions(K, pending.size, rng)
        hit = cond.target == c
        y[pending[hit]] = cond.y_tilde[hit]
        pending = pending[~hit]
    forced = np.zeros(count, dtype=bool)
    forced[pending] = True
    y[pending] = np.eye(K)[c]
    return y, forced


def generate_batch(gen: GeneratorNet, per_class: int, K: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``per_class`` generated samples for each of the K classes, with their targets."""
    samples, targets = [], []
    for c in range(K):
        y, _ = conditions_for_class(c, per_class, K, rng)
        z = rng.standard_normal((per_class, gen.latent_dim))
        samples.append(generate(gen, z, y))
        targets.append(np.full(per_class, c, dtype=np.int64))
    return np.concatenate(samples), np.concatenate(targets)
