"""Ranking metrics with OOD as the positive class, plus per-epoch sample statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .oodscores import ue_score


@dataclass(frozen=True)
class BinaryScoreSet:
    """OOD (positive) and ID (negative) scores, higher meaning more OOD."""

    pos_scores: np.ndarray
    neg_scores: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos_scores, dtype=np.float64).ravel()
        neg = np.asarray(self.neg_scores, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("BinaryScoreSet: scores must be finite")
        object.__setattr__(self, "pos_scores", pos)
        object.__setattr__(self, "neg_scores", neg)

    def require_both(self, what: str) -> None:
        if self.pos_scores.size == 0 or self.neg_scores.size == 0:
            raise ValueError(f"{what}: both positive and negative scores are required")


def auroc(s: BinaryScoreSet) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), via the Mann-Whitney rank sum."""
    s.require_both("auroc")
    n_pos, n_neg = s.pos_scores.size, s.neg_scores.size
    ranks = rankdata(np.concatenate([s.pos_scores, s.neg_scores]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _counts_at_thresholds(s: BinaryScoreSet):
    """Distinct thresholds (descending) with #pos and #neg scoring >= each."""
    thresholds = np.unique(np.concatenate([s.pos_scores, s.neg_scores]))[::-1]
    pos_sorted = np.sort(s.pos_scores)
    neg_sorted = np.sort(s.neg_scores)
    tp = s.pos_scores.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = s.neg_scores.size - np.searchsorted(neg_sorted, thresholds, side="left")
    return thresholds, tp, fp


def aupr(s: BinaryScoreSet) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    if s.pos_scores.size == 0:
        raise ValueError("aupr: positive scores are required")
    _, tp, fp = _counts_at_thresholds(s)
    precision = tp / (tp + fp)
    recall = tp / s.pos_scores.size
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


def fpr_at_95_tpr(s: BinaryScoreSet) -> float:
    """FPR at the highest threshold that still flags >= 95% of the positives.

    A sample is flagged when its score is >= the threshold, so tied scores
    always switch together.
    """
    s.require_both("fpr_at_95_tpr")
    _, tp, fp = _counts_at_thresholds(s)
    # integer form of tp / n_pos >= 0.95
    ok = np.nonzero(100 * tp >= 95 * s.pos_scores.size)[0]
    return float(fp[ok[0]] / s.neg_scores.size)


def roc_curve(s: BinaryScoreSet) -> np.ndarray:
    """Rows of (threshold, fpr, tpr), thresholds descending."""
    s.require_both("roc_curve")
    thr, tp, fp = _counts_at_thresholds(s)
    return np.column_stack([thr, fp / s.neg_scores.size, tp / s.pos_scores.size])


def pr_curve(s: BinaryScoreSet) -> np.ndarray:
    """Rows of (threshold, recall, precision), thresholds descending."""
    thr, tp, fp = _counts_at_thresholds(s)
    return np.column_stack([thr, tp / s.pos_scores.size, tp / (tp + fp)])


def accuracy_matrix(clf, id_test, ood_tests: dict, tau_T: float) -> dict[str, float]:
    """One row of the ID/OOD accuracy table.

    ``"id"`` holds the share of ID test samples accepted with the right label;
    each OOD set name maps to the share caught at Level 1 or Level 2.
    """
    from .tieloop import Level, infer

    row = {}
    v = infer(clf, id_test.samples, tau_T)
    row["id"] = float(np.mean((v.levels == Level.ID) & (v.predicted == id_test.labels)))
    for name, ds in ood_tests.items():
        v = infer(clf, ds.samples, tau_T)
        row[name] = float(np.mean(v.levels != Level.ID))
    return row


@dataclass
class EpochMetricRow:
    epoch: int
    cls: int
    count: int
    entropy: float
    confidence: float
    margin: float
    ue: float


def sample_statistics(probs) -> dict[str, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    top2 = np.sort(p, axis=1)[:, -2:]
    return {
        "entropy": -plogp.sum(axis=1),
        "confidence": top2[:, 1],
        "margin": top2[:, 1] - top2[:, 0],
        "ue": ue_score(p),
    }


def epoch_sample_metrics(probs, classes, epoch: int = 0) -> list[EpochMetricRow]:
    """Per-class means of entropy, max probability, top-1/top-2 gap and UE."""
    classes = np.asarray(classes, dtype=np.int64)
    stats = sample_statistics(probs)
    rows = []
    for c in np.unique(classes):
        m = classes == c
        rows.append(EpochMetricRow(epoch, int(c), int(m.sum()),
                                   *(float(stats[k][m].mean()) for k in ("entropy", "confidence", "margin", "ue"))))
    return rows
