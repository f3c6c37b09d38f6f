"""Per-sample OOD scores: UE, MSP, ODIN, Energy and Mahalanobis.

Raw score directions differ: MSP and ODIN are confidences (low means OOD),
while UE, Energy and Mahalanobis grow with OOD-ness. :func:`to_ood_direction`
maps every score to "higher = more OOD" before ranking metrics see it.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffcore import backward, frozen, log_softmax, mul, sum_, Tensor
from .diffcore.tensor import _softmax_np, reset_tape
from .models import ClassifierNet, classifier_forward, predict

log = logging.getLogger(__name__)

SCORE_NAMES = ("ue", "msp", "odin", "energy", "mahalanobis")
_CONFIDENCE_SCORES = {"msp", "odin"}

ODIN_TEMPERATURE = 1000.0
ODIN_EPSILON = 0.0014
ENERGY_TEMPERATURE = 1.0


def ue_score(p) -> np.ndarray | float:
    """Uncertainty estimate: 1 minus the squared distance from uniform,
    normalised by that of the one-hot vector at the argmax.

    Works on a single vector or row-wise on a ``(B, K)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    K = p.shape[-1]
    if K < 2:
        raise ValueError(f"ue_score: need at least 2 classes, got {K}")
    spread = ((p - 1.0 / K) ** 2).sum(axis=-1)
    # sum_i (delta_ik - 1/K)^2 is (K-1)/K whatever k is
    ue = 1.0 - spread / ((K - 1) / K)
    ue = np.clip(ue, 0.0, 1.0)
    return float(ue) if ue.ndim == 0 else ue


def msp_score(p) -> np.ndarray | float:
    out = np.asarray(p, dtype=np.float64).max(axis=-1)
    return float(out) if out.ndim == 0 else out


def energy_score(logits_id, T: float = ENERGY_TEMPERATURE) -> np.ndarray | float:
    """``-T * logsumexp(logits / T)``; higher means more OOD."""
    if T <= 0:
        raise ValueError("energy_score: temperature must be positive")
    z = np.asarray(logits_id, dtype=np.float64) / T
    m = z.max(axis=-1)
    out = -T * (m + np.log(np.exp(z - m[..., None]).sum(axis=-1)))
    return float(out) if out.ndim == 0 else out


def drop_garbage_and_renormalize(p_full) -> np.ndarray:
    """Remove the trailing garbage probability and rescale the rest to sum to 1."""
    p = np.asarray(p_full, dtype=np.float64)
    garbage = p[..., -1]
    if np.any(garbage >= 1.0):
        raise ValueError("drop_garbage_and_renormalize: all mass on the garbage class (Level-1 OOD sample)")
    return p[..., :-1] / (1.0 - garbage)[..., None]


def odin_score(clf: ClassifierNet, x, T: float = ODIN_TEMPERATURE, eps: float = ODIN_EPSILON) -> np.ndarray:
    """Temperature-scaled max softmax over the ID logits after a gradient-sign nudge.

    The input moves by ``eps`` in the direction that raises the log of the
    temperature-scaled max ID probability, then is clamped to ``[0, 1]``.
    """
    if T <= 0:
        raise ValueError("odin_score: temperature must be positive")
    if eps < 0:
        raise ValueError("odin_score: eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    n = clf.n_classes
    if eps > 0:
        reset_tape()
        xt = Tensor(x, requires_grad=True)
        with frozen(clf.parameters()):
            logits, _ = classifier_forward(clf, xt)
            logp = log_softmax(logits[:, :n] * (1.0 / T))
            top = np.zeros(logp.shape)
            top[np.arange(len(x)), logp.data.argmax(axis=1)] = 1.0
            objective = sum_(mul(logp, top))
        backward(objective)
        grad = xt.grad
        if grad is None or not np.all(np.isfinite(grad)):
            log.warning("odin_score: non-finite input gradient, falling back to eps=0")
        else:
            x = np.clip(x + eps * np.sign(grad), 0.0, 1.0)
    logits, _ = predict(clf, x)
    return _softmax_np(logits[:, :n] / T).max(axis=1)


@dataclass
class MahalanobisModel:
    class_means: np.ndarray
    shared_covariance: np.ndarray
    precision: np.ndarray
    eps_cov: float


def mahalanobis_fit(features, labels, eps_cov: float | None = None,
                    n_classes: int | None = None) -> MahalanobisModel:
    """Class means plus one pooled covariance, shrunk by ``eps_cov * I``.

    ``eps_cov=None`` uses ``1e-3 * trace(cov) / F``. Labels ``>= n_classes``
    (the garbage class) are dropped before fitting.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if n_classes is not None:
        keep = y < n_classes
        X, y = X[keep], y[keep]
    else:
        n_classes = int(y.max()) + 1
    M, F = X.shape
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts < 2):
        raise ValueError(f"mahalanobis_fit: every class needs >= 2 samples, got counts {counts.tolist()}")
    means = np.stack([X[y == c].mean(axis=0) for c in range(n_classes)])
    centered = X - means[y]
    cov = centered.T @ centered / M
    if eps_cov is None:
        eps_cov = 1e-3 * np.trace(cov) / F
    for attempt in range(4):
        shrunk = cov + eps_cov * np.eye(F)
        try:
            np.linalg.cholesky(shrunk)
            precision = np.linalg.inv(shrunk)
        except np.linalg.LinAlgError:
            precision = None
        if precision is not None and np.all(np.isfinite(precision)):
            precision = 0.5 * (precision + precision.T)
            return MahalanobisModel(means, shrunk, precision, float(eps_cov))
        if attempt == 3:
            break
        eps_cov = max(eps_cov * 10.0, 1e-12)
    raise np.linalg.LinAlgError(f"mahalanobis_fit: covariance singular even with eps_cov={eps_cov:g}")


def mahalanobis_score(model: MahalanobisModel, features) -> np.ndarray | float:
    """Squared Mahalanobis distance to the nearest class mean."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    best = np.full(len(f), np.inf)
    for mu in model.class_means:
        d = f - mu
        best = np.minimum(best, np.einsum("ij,jk,ik->i", d, model.precision, d))
    best = np.maximum(best, 0.0)
    return float(best[0]) if single else best


def to_ood_direction(name: str, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return -values if name in _CONFIDENCE_SCORES else values


@dataclass
class ScoredSamples:
    """Batch of scored inputs; each array has one row per sample."""

    logits: np.ndarray
    probs_full: np.ndarray
    probs_id: np.ndarray
    features: np.ndarray
    ue_full: np.ndarray
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.logits)


@dataclass
class ScoreSettings:
    odin_temperature: float = ODIN_TEMPERATURE
    odin_epsilon: float = ODIN_EPSILON
    energy_temperature: float = ENERGY_TEMPERATURE


def _score_chunk(clf, x, maha, settings):
    logits, feats = predict(clf, x)
    n = clf.n_classes
    probs_full = _softmax_np(logits)
    # same as renormalising probs_full[:, :n], without cancellation when garbage ~ 1
    probs_id = _softmax_np(logits[:, :n])
    scores = {
        "ue": ue_score(probs_id),
        "msp": msp_score(probs_id),
        "odin": odin_score(clf, x, settings.odin_temperature, settings.odin_epsilon),
        "energy": energy_score(logits[:, :n], settings.energy_temperature),
    }
    if maha is not None:
        scores["mahalanobis"] = mahalanobis_score(maha, feats)
    return ScoredSamples(logits, probs_full, probs_id, feats, ue_score(probs_full), scores)


def score_samples(clf: ClassifierNet, x, maha: MahalanobisModel | None = None,
                  settings: ScoreSettings | None = None, chunk: int = 1024,
                  threads: int | None = None) -> ScoredSamples:
    """All scores for a batch, chunked over ``TIE_THREADS`` worker threads.

    Chunks are scored independently and concatenated in input order, so the
    result does not depend on the thread count.
    """
    settings = settings or ScoreSettings()
    x = np.asarray(x, dtype=np.float64)
    if threads is None:
        threads = max(1, int(os.environ.get("TIE_THREADS", "1")))
    pieces = [x[i:i + chunk] for i in range(0, len(x), chunk)] or [x]
    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _score_chunk(clf, c, maha, settings), pieces))
    else:
        parts = [_score_chunk(clf, c, maha, settings) for c in pieces]
    keys = parts[0].scores.keys()
    return ScoredSamples(
        logits=np.concatenate([p.logits for p in parts]),
        probs_full=np.concatenate([p.probs_full for p in parts]),
        probs_id=np.concatenate([p.probs_id for p in parts]),
        features=np.concatenate([p.features for p in parts]),
        ue_full=np.concatenate([p.ue_full for p in parts]),
        scores={k: np.concatenate([p.scores[k] for p in parts]) for k in keys},
    )
