"""Training-inversion-exclusion loop and two-level inference."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .diffcore import adam_step, backward, reset_tape, weighted_cross_entropy
from .inversion import InversionLossParts, generate_batch, inversion_step
from .metrics import EpochMetricRow, epoch_sample_metrics
from .models import ClassifierNet, GeneratorNet, classifier_forward, init_weights, predict_proba
from .oodscores import ue_score

log = logging.getLogger(__name__)

MODES = ("tie", "no_tie_baseline")


class TrainingAborted(RuntimeError):
    """Raised when a run stops early; ``partial`` holds whatever finished."""

    def __init__(self, message: str, partial: "TieRun | None" = None):
        super().__init__(message)
        self.partial = partial


@dataclass
class TieConfig:
    n: int
    epochs: int = 20
    lam: float = 0.5
    lr_clf: float = 1e-4
    lr_gen: float = 1e-3
    per_class_inversions: int = 200
    alpha: float = 0.1
    beta: float = 1.0
    gamma0: float = 10.0
    gamma_max: float = 100.0
    batch_size: int = 64
    inversion_batch: int = 64
    inversion_steps: int = 100
    garbage_init_count: int | None = None
    garbage_cap: int | None = None
    clf_hidden: Sequence[int] = (256, 128)
    gen_hidden: Sequence[int] = (128, 256)
    latent_dim: int = 32
    sign_mode: int = -1
    seed: int = 0
    mode: str = "tie"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("TieConfig: n must be >= 1")
        if self.epochs < 1:
            raise ValueError("TieConfig: epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("TieConfig: lam must be >= 0")
        for name in ("lr_clf", "lr_gen", "per_class_inversions", "batch_size", "inversion_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TieConfig: {name} must be > 0")
        if self.inversion_steps < 0:
            raise ValueError("TieConfig: inversion_steps must be >= 0")
        if self.sign_mode not in (-1, 1):
            raise ValueError("TieConfig: sign_mode must be -1 or +1")
        if self.mode not in MODES:
            raise ValueError(f"TieConfig: mode must be one of {MODES}")

    @property
    def cap(self) -> int:
        return self.garbage_cap if self.garbage_cap is not None else 50 * self.per_class_inversions

    def gamma_at(self, t: int) -> float:
        """Diversity weight for 1-based epoch ``t``, linear from gamma0 to gamma_max."""
        if self.epochs == 1:
            return float(self.gamma0)
        return float(self.gamma0 + (self.gamma_max - self.gamma0) * (t - 1) / (self.epochs - 1))


class GarbageBuffer:
    """Samples labelled with the garbage class.

    Starts with clamped Gaussian noise. Excluded inversions are appended
    with their epoch; once ``capacity`` is exceeded the oldest excluded
    samples are dropped first and the noise seeds are always kept.
    """

    def __init__(self, noise: np.ndarray, capacity: int | None = None):
        self.noise = np.asarray(noise, dtype=np.float64)
        self.capacity = capacity
        self._chunks: list[tuple[int, np.ndarray]] = []

    @property
    def dim(self) -> int:
        return self.noise.shape[1]

    def __len__(self) -> int:
        return len(self.noise) + sum(len(c) for _, c in self._chunks)

    @property
    def excluded_count(self) -> int:
        return len(self) - len(self.noise)

    def add(self, samples: np.ndarray, epoch: int) -> None:
        samples = np.asarray(samples, dtype=np.float64).reshape(-1, self.dim)
        if len(samples):
            self._chunks.append((epoch, samples.copy()))
        self._evict()

    def _evict(self) -> None:
        if self.capacity is None:
            return
        excess = len(self) - max(self.capacity, len(self.noise))
        while excess > 0 and self._chunks:
            epoch, chunk = self._chunks[0]
            if len(chunk) <= excess:
                self._chunks.pop(0)
                excess -= len(chunk)
            else:
                self._chunks[0] = (epoch, chunk[excess:])
                excess = 0

    @property
    def samples(self) -> np.ndarray:
        return np.concatenate([self.noise] + [c for _, c in self._chunks])

    def origins(self) -> list[str]:
        tags = ["noise"] * len(self.noise)
        for epoch, chunk in self._chunks:
            tags.extend([f"excluded@{epoch}"] * len(chunk))
        return tags


def init_garbage(count: int, D: int, rng: np.random.Generator, capacity: int | None = None) -> GarbageBuffer:
    """``count`` standard-normal vectors mapped by ``(x + 3) / 6`` and clamped to [0, 1]."""
    if count < 1:
        raise ValueError("init_garbage: count must be >= 1")
    noise = np.clip((rng.standard_normal((count, D)) + 3.0) / 6.0, 0.0, 1.0)
    return GarbageBuffer(noise, capacity)


def compute_class_weights(train_counts, garbage_count: int) -> np.ndarray:
    """Inverse-frequency weights ``total / ((n+1) * count_c)`` over ID classes plus garbage."""
    counts = np.append(np.asarray(train_counts, dtype=np.float64), float(garbage_count))
    if np.any(counts < 1):
        raise ValueError(f"compute_class_weights: every class needs >= 1 sample, got {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_classifier_epoch(clf: ClassifierNet, X: np.ndarray, y: np.ndarray, weights, lr: float,
                           batch_size: int, rng: np.random.Generator) -> float:
    """One shuffled pass of minibatch Adam on weighted CE; returns the sample-mean loss."""
    total, seen = 0.0, 0
    params = clf.parameters()
    for idx in epoch_batches(len(X), batch_size, rng):
        reset_tape()
        logits, _ = classifier_forward(clf, X[idx])
        loss = weighted_cross_entropy(logits, y[idx], weights)
        value = loss.item()
        if not np.isfinite(value):
            reset_tape()
            raise TrainingAborted(f"train_classifier_epoch: non-finite loss after {seen} samples")
        for p in params:
            p.grad = None
        backward(loss)
        adam_step(params, lr)
        total += value * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def compute_threshold(clf: ClassifierNet, X_train: np.ndarray, lam: float) -> tuple[float, float, float]:
    """Mean, population std and ``mean + lam * std`` of training-set UE over all n+1 outputs."""
    if len(X_train) == 0:
        raise ValueError("compute_threshold: empty training set")
    u = ue_score(predict_proba(clf, X_train))
    mu, sigma = float(np.mean(u)), float(np.std(u))
    return mu, sigma, mu + lam * sigma


@dataclass
class Exclusion:
    kept: np.ndarray
    kept_targets: np.ndarray
    excluded: np.ndarray
    excluded_targets: np.ndarray
    ue: np.ndarray
    mask: np.ndarray


def exclude_uncertain(clf: ClassifierNet, samples: np.ndarray, targets: np.ndarray, tau: float,
                      buffer: GarbageBuffer | None = None, epoch: int = 0) -> Exclusion:
    """Split inversions at ``UE > tau``; the uncertain ones go to ``buffer`` if given."""
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets)
    u = ue_score(predict_proba(clf, samples)) if len(samples) else np.zeros(0)
    mask = u > tau
    if buffer is not None:
        buffer.add(samples[mask], epoch)
    return Exclusion(samples[~mask], targets[~mask], samples[mask], targets[mask], u, mask)


class Level(enum.IntEnum):
    ID = 0
    OOD_L1_GARBAGE = 1
    OOD_L2_THRESHOLD = 2


@dataclass
class InferenceVerdict:
    predicted_class: int
    level: Level
    ue: float
    probs: np.ndarray


@dataclass
class Verdicts:
    """Batch of verdicts stored column-wise."""

    predicted: np.ndarray
    levels: np.ndarray
    ue: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.predicted)

    def __getitem__(self, i: int) -> InferenceVerdict:
        return InferenceVerdict(int(self.predicted[i]), Level(int(self.levels[i])), float(self.ue[i]), self.probs[i])


def decide(probs, tau_T: float) -> Verdicts:
    """Two-level rule on (n+1)-way probabilities; argmax ties go to the lowest index."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    garbage = p.shape[1] - 1
    pred = p.argmax(axis=1)
    u = ue_score(p)
    levels = np.full(len(p), int(Level.ID))
    levels[(pred != garbage) & (u > tau_T)] = int(Level.OOD_L2_THRESHOLD)
    levels[pred == garbage] = int(Level.OOD_L1_GARBAGE)
    return Verdicts(pred, levels, u, p)


def infer(clf: ClassifierNet, x, tau_T: float) -> Verdicts:
    return decide(predict_proba(clf, np.atleast_2d(np.asarray(x, dtype=np.float64))), tau_T)


@dataclass
class EpochState:
    epoch: int
    mu: float
    sigma: float
    tau: float
    class_weights: list[float]
    gamma: float
    excluded_count: int
    garbage_size: int
    train_loss: float
    inv_kl: float = float("nan")
    inv_ce: float = float("nan")
    inv_cosine: float = float("nan")


@dataclass
class EpochOutputs:
    """Everything an epoch produced, handed to the per-epoch callback."""

    state: EpochState
    classifier: ClassifierNet
    generator: GeneratorNet
    inverted: np.ndarray | None = None
    inverted_targets: np.ndarray | None = None
    exclusion: Exclusion | None = None
    metric_rows: list[EpochMetricRow] = field(default_factory=list)


@dataclass
class TieRun:
    config: TieConfig
    classifier: ClassifierNet
    generator: GeneratorNet
    garbage: GarbageBuffer
    history: list[EpochState] = field(default_factory=list)
    metric_rows: list[EpochMetricRow] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.history[-1].tau if self.history else float("nan")


RNG_STREAMS = ("clf_init", "gen_init", "garbage", "shuffle", "inversion", "generation")


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per concern, so the modes share classifier randomness."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


def build_models(cfg: TieConfig, input_dim: int) -> tuple[ClassifierNet, GeneratorNet]:
    clf = ClassifierNet(input_dim, cfg.n, cfg.clf_hidden)
    gen = GeneratorNet(input_dim, cfg.n + 1, cfg.latent_dim, cfg.gen_hidden)
    return clf, gen


def run_tie(cfg: TieConfig, X_train: np.ndarray, y_train: np.ndarray,
            on_epoch: Callable[[EpochOutputs], None] | None = None) -> TieRun:
    """Run every epoch of train -> invert -> threshold -> exclude.

    ``no_tie_baseline`` mode keeps the noise-only garbage class and skips
    inversion and exclusion. On failure a :class:`TrainingAborted` carries
    the epochs that did finish.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if y_train.min() < 0 or y_train.max() >= cfg.n:
        raise ValueError(f"run_tie: training labels must lie in [0, {cfg.n})")
    counts = np.bincount(y_train, minlength=cfg.n)
    rngs = make_rngs(cfg.seed)
    clf, gen = build_models(cfg, X_train.shape[1])
    init_weights(clf, int(rngs["clf_init"].integers(2**63)))
    init_weights(gen, int(rngs["gen_init"].integers(2**63)))
    n_noise = cfg.garbage_init_count or int(round(len(X_train) / cfg.n))
    garbage = init_garbage(n_noise, X_train.shape[1], rngs["garbage"], cfg.cap)
    run = TieRun(cfg, clf, gen, garbage)
    tie_mode = cfg.mode == "tie"
    K = cfg.n + 1

    for t in range(1, cfg.epochs + 1):
        try:
            weights = compute_class_weights(counts, len(garbage))
            g_samples = garbage.samples
            X_union = np.concatenate([X_train, g_samples])
            y_union = np.concatenate([y_train, np.full(len(g_samples), cfg.n, dtype=np.int64)])
            loss = train_classifier_epoch(clf, X_union, y_union, weights, cfg.lr_clf,
                                          cfg.batch_size, rngs["shuffle"])
            gamma = cfg.gamma_at(t)
            parts: list[InversionLossParts] = []
            inv_x = inv_y = None
            if tie_mode:
                for _ in range(cfg.inversion_steps):
                    parts.append(inversion_step(gen, clf, cfg.inversion_batch, cfg.alpha, cfg.beta, gamma,
                                                cfg.sign_mode, cfg.lr_gen, rngs["inversion"]))
                inv_x, inv_y = generate_batch(gen, cfg.per_class_inversions, K, rngs["generation"])
            mu, sigma, tau = compute_threshold(clf, X_train, cfg.lam)
            exclusion = None
            rows: list[EpochMetricRow] = []
            if tie_mode:
                exclusion = exclude_uncertain(clf, inv_x, inv_y, tau, garbage, epoch=t)
                rows = epoch_sample_metrics(predict_proba(clf, inv_x), inv_y, epoch=t)
        except (FloatingPointError, TrainingAborted) as exc:
            raise TrainingAborted(f"epoch {t}: {exc}", run) from exc
        done = [p for p in parts if p.stepped]
        state = EpochState(
            epoch=t, mu=mu, sigma=sigma, tau=tau, class_weights=[float(w) for w in weights],
            gamma=gamma if tie_mode else float("nan"),
            excluded_count=int(exclusion.mask.sum()) if exclusion is not None else 0,
            garbage_size=len(garbage), train_loss=loss,
            inv_kl=float(np.mean([p.kl for p in done])) if done else float("nan"),
            inv_ce=float(np.mean([p.ce for p in done])) if done else float("nan"),
            inv_cosine=float(np.mean([p.cosine for p in done])) if done else float("nan"),
        )
        run.history.append(state)
        run.metric_rows.extend(rows)
        log.info("epoch %d: loss=%.4f tau=%.4f excluded=%d garbage=%d", t, loss, tau,
                 state.excluded_count, state.garbage_size)
        if on_epoch is not None:
            on_epoch(EpochOutputs(state, clf, gen, inv_x, inv_y, exclusion, rows))
    return run
