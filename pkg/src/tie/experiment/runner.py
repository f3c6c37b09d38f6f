"""Training, evaluation and dump routines behind the command line."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..inversion import generate_batch
from ..metrics import BinaryScoreSet, accuracy_matrix, aupr, auroc, fpr_at_95_tpr, pr_curve, roc_curve
from ..models import ClassifierNet, load_checkpoint, predict, save_checkpoint
from ..oodscores import (
    SCORE_NAMES, MahalanobisModel, ScoredSamples, energy_score, mahalanobis_fit, mahalanobis_score, msp_score,
    score_samples, to_ood_direction, ue_score,
)
from ..diffcore.tensor import _softmax_np
from ..tieloop import RNG_STREAMS, EpochOutputs, Level, TieRun, TrainingAborted, decide, run_tie
from .artifacts import dump_inversions, read_csv, write_csv, write_manifest
from .config import Datasets, ExperimentConfig, SynthData, load_datasets

log = logging.getLogger(__name__)

HISTORY_FILE = "run_history.csv"
EPOCH_METRICS_FILE = "epoch_metrics.csv"
ACCURACY_FILE = "accuracy_matrix.csv"
LEVELS_FILE = "detection_levels.csv"
OOD_METRICS_FILE = "ood_metrics.csv"
SCORES_FILE = "scores.csv"


def history_header(n: int) -> list[str]:
    return (["epoch", "mu", "sigma", "tau", "gamma", "excluded_count", "garbage_size", "train_loss",
             "inv_kl", "inv_ce", "inv_cosine"] + [f"weight_{c}" for c in range(n + 1)])


def write_history(path, run: TieRun) -> Path:
    rows = [[s.epoch, s.mu, s.sigma, s.tau, s.gamma, s.excluded_count, s.garbage_size, s.train_loss,
             s.inv_kl, s.inv_ce, s.inv_cosine, *s.class_weights] for s in run.history]
    return write_csv(path, history_header(run.config.n), rows)


def write_epoch_metrics(path, run: TieRun) -> Path:
    return write_csv(path, ["epoch", "class", "count", "entropy", "confidence", "margin", "ue"],
                     ([r.epoch, r.cls, r.count, r.entropy, r.confidence, r.margin, r.ue] for r in run.metric_rows))


def run_seeds(cfg: ExperimentConfig) -> dict:
    seeds = {"seed": cfg.seed, "streams": list(RNG_STREAMS)}
    if isinstance(cfg.data, SynthData):
        seeds |= {"train_data": cfg.data.train_seed, "test_data": cfg.data.test_seed}
    return seeds


@dataclass
class TrainResult:
    run: TieRun
    out_dir: Path
    evaluation: "Evaluation"


def train(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Run the configured loop, then evaluate; every artifact lands in ``out_dir``.

    On a mid-run failure the finished epochs are still written, the manifest
    is marked ``aborted`` and :class:`TrainingAborted` propagates.
    """
    out = Path(out_dir or cfg.out_dir or "")
    if not str(out):
        raise ValueError("no output directory: pass --out or set out_dir in the config")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical_json())
    data = load_datasets(cfg)
    tcfg = cfg.tie_config()

    def on_epoch(e: EpochOutputs) -> None:
        s = e.state
        save_checkpoint(out / "checkpoints" / f"epoch_{s.epoch:03d}.npz", e.classifier, e.generator, cfg.seed,
                        {"epoch": s.epoch, "tau": s.tau, "mode": cfg.mode,
                         "image_shape": list(data.image_shape) if data.image_shape else None})
        if e.inverted is not None:
            dump_inversions(out / "inversions" / f"epoch_{s.epoch:03d}", e.inverted, e.inverted_targets,
                            tcfg.n + 1, data.image_shape)

    try:
        run = run_tie(tcfg, data.train.samples, data.train.labels, on_epoch=on_epoch)
    except TrainingAborted as exc:
        if exc.partial is not None:
            write_history(out / HISTORY_FILE, exc.partial)
            write_epoch_metrics(out / EPOCH_METRICS_FILE, exc.partial)
        write_manifest(out, cfg.canonical_json(), cfg.config_hash(), run_seeds(cfg), "aborted",
                       {"error": str(exc)})
        raise
    write_history(out / HISTORY_FILE, run)
    write_epoch_metrics(out / EPOCH_METRICS_FILE, run)
    ev = evaluate(run.classifier, run.tau, data, cfg)
    ev.write(out)
    write_manifest(out, cfg.canonical_json(), cfg.config_hash(), run_seeds(cfg), "complete")
    return TrainResult(run, out, ev)


@dataclass
class MetricRow:
    ood_set: str
    score: str
    n_pos: int
    n_neg: int
    auroc: float | None
    aupr: float | None
    fpr95: float | None


@dataclass
class Evaluation:
    """Accuracy row, per-level detection rates and survivor-population score metrics."""

    id_name: str
    tau: float
    accuracy: dict[str, float]
    levels: dict[str, tuple[int, float, float, float]]
    metrics: list[MetricRow]
    scored: dict[str, tuple[ScoredSamples, np.ndarray, np.ndarray]] = field(default_factory=dict)
    curves: dict[tuple[str, str], BinaryScoreSet] = field(default_factory=dict)

    def metric(self, ood_set: str, score: str) -> MetricRow:
        for m in self.metrics:
            if m.ood_set == ood_set and m.score == score:
                return m
        raise KeyError((ood_set, score))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        names = list(self.accuracy)
        write_csv(out / ACCURACY_FILE, ["id_set", *names], [[self.id_name, *self.accuracy.values()]])
        write_csv(out / LEVELS_FILE, ["set", "count", "id_rate", "garbage_rate", "threshold_rate"],
                  ([k, *v] for k, v in self.levels.items()))
        write_csv(out / OOD_METRICS_FILE, ["ood_set", "score", "n_pos", "n_neg", "auroc", "aupr", "fpr_at_95_tpr"],
                  ([m.ood_set, m.score, m.n_pos, m.n_neg, m.auroc, m.aupr, m.fpr95] for m in self.metrics))
        header = ["set", "index", "is_ood", "level", "predicted", "in_population", "ue_full", *SCORE_NAMES]
        rows = []
        for name, (sc, verdict_levels, population) in self.scored.items():
            for i in range(len(sc)):
                rows.append([name, i, name != self.id_name, int(verdict_levels[i]), int(sc.logits[i].argmax()), bool(population[i]),
                             sc.ue_full[i], *(sc.scores[k][i] for k in SCORE_NAMES)])
        write_csv(out / SCORES_FILE, header, rows)
        for (ood, score), s in self.curves.items():
            write_csv(out / "curves" / f"{ood}_{score}_roc.csv", ["threshold", "fpr", "tpr"], roc_curve(s))
            write_csv(out / "curves" / f"{ood}_{score}_pr.csv", ["threshold", "recall", "precision"], pr_curve(s))


def fit_mahalanobis(clf: ClassifierNet, data: Datasets, eps_cov: float | None) -> MahalanobisModel:
    _, feats = predict(clf, data.train.samples)
    return mahalanobis_fit(feats, data.train.labels, eps_cov=eps_cov, n_classes=clf.n_classes)


def evaluate(clf: ClassifierNet, tau: float, data: Datasets, cfg: ExperimentConfig) -> Evaluation:
    """Two-level detection rates plus threshold-free metrics on the Level-1 survivors.

    Positives are OOD samples whose argmax is an ID class; negatives are ID
    test samples classified correctly. Sets with no survivors report N/A.
    """
    if not data.ood:
        raise ValueError("evaluate: at least one OOD set is required")
    n = clf.n_classes
    settings = cfg.scores.settings()
    maha = fit_mahalanobis(clf, data, cfg.scores.eps_cov)
    acc = accuracy_matrix(clf, data.test, data.ood, tau)

    def score_set(ds):
        sc = score_samples(clf, ds.samples, maha, settings)
        return sc, decide(sc.probs_full, tau).levels

    id_sc, id_levels = score_set(data.test)
    id_pop = id_sc.logits.argmax(axis=1) == data.test.labels
    scored = {data.test.name: (id_sc, id_levels, id_pop)}
    levels = {data.test.name: _level_rates(id_levels)}
    metrics, curves = [], {}
    for name, ds in data.ood.items():
        sc, lv = score_set(ds)
        pop = sc.logits.argmax(axis=1) != n
        scored[name] = (sc, lv, pop)
        levels[name] = _level_rates(lv)
        for score in SCORE_NAMES:
            pos = to_ood_direction(score, sc.scores[score][pop])
            neg = to_ood_direction(score, id_sc.scores[score][id_pop])
            if len(pos) == 0 or len(neg) == 0:
                metrics.append(MetricRow(name, score, len(pos), len(neg), None, None, None))
                continue
            s = BinaryScoreSet(pos, neg)
            metrics.append(MetricRow(name, score, len(pos), len(neg), auroc(s), aupr(s), fpr_at_95_tpr(s)))
            curves[(name, score)] = s
    return Evaluation(data.test.name, tau, acc, levels, metrics, scored, curves)


def _level_rates(levels: np.ndarray) -> tuple[int, float, float, float]:
    return (len(levels), *(float(np.mean(levels == lv)) if len(levels) else float("nan")
                           for lv in (Level.ID, Level.OOD_L1_GARBAGE, Level.OOD_L2_THRESHOLD)))


def evaluate_checkpoint(checkpoint, cfg: ExperimentConfig, out_dir) -> Evaluation:
    clf, _, meta = load_checkpoint(checkpoint)
    tau = meta.get("extra", {}).get("tau")
    if tau is None:
        raise ValueError(f"{checkpoint}: checkpoint carries no threshold")
    data = load_datasets(cfg)
    if not data.ood:
        raise ValueError("eval: the config names no OOD sets")
    ev = evaluate(clf, float(tau), data, cfg)
    ev.write(out_dir)
    return ev


def invert_dump(checkpoint, per_class: int, out_dir, seed: int = 0) -> list[Path]:
    """Generate ``per_class`` samples for every output class and write grids or points."""
    clf, gen, meta = load_checkpoint(checkpoint)
    if gen is None:
        raise ValueError(f"{checkpoint}: checkpoint holds no generator")
    shape = meta.get("extra", {}).get("image_shape")
    samples, targets = generate_batch(gen, per_class, clf.num_outputs, np.random.default_rng(seed))
    return dump_inversions(out_dir, samples, targets, clf.num_outputs, tuple(shape) if shape else None)


def _columns(header: list[str], rows: list[list[str]], prefix: str) -> np.ndarray | None:
    idx = [i for i, h in enumerate(header) if h.startswith(prefix)]
    idx.sort(key=lambda i: int(header[i][len(prefix):]))
    if not idx:
        return None
    return np.array([[float(r[i]) for i in idx] for r in rows], dtype=np.float64).reshape(len(rows), len(idx))


def score_logits_csv(in_csv, out_csv, fit_csv=None, energy_temperature: float = 1.0,
                     eps_cov: float | None = None) -> Path:
    """Scores from exported ``logit_*`` (n+1 columns, garbage last) and ``feat_*`` columns.

    UE, MSP and Energy need only logits. Mahalanobis is added when ``fit_csv``
    supplies labelled training features (``label`` plus ``feat_*``). ODIN needs
    the model and its inputs, so it is not available from exported logits.
    """
    header, rows = read_csv(in_csv)
    logits = _columns(header, rows, "logit_")
    if logits is None or logits.shape[1] < 3:
        raise ValueError(f"{in_csv}: need at least three logit_<k> columns (n >= 2 ID classes plus garbage)")
    ident = logits[:, :-1]
    probs_id = _softmax_np(ident)
    out_header = ["index", "ue", "msp", "energy", "ue_full"]
    cols = [ue_score(probs_id), msp_score(probs_id), energy_score(ident, energy_temperature),
            ue_score(_softmax_np(logits))]
    if fit_csv is not None:
        feats = _columns(header, rows, "feat_")
        if feats is None:
            raise ValueError(f"{in_csv}: Mahalanobis scoring needs feat_<k> columns")
        fh, frows = read_csv(fit_csv)
        if "label" not in fh:
            raise ValueError(f"{fit_csv}: missing label column")
        labels = np.array([int(r[fh.index("label")]) for r in frows])
        model = mahalanobis_fit(_columns(fh, frows, "feat_"), labels, eps_cov, n_classes=logits.shape[1] - 1)
        out_header.append("mahalanobis")
        cols.append(mahalanobis_score(model, feats))
    return write_csv(out_csv, out_header, ([i, *(c[i] for c in cols)] for i in range(len(logits))))


def export_logits(clf: ClassifierNet, x: np.ndarray, path, labels=None) -> Path:
    logits, feats = predict(clf, x)
    header = [f"logit_{k}" for k in range(logits.shape[1])] + [f"feat_{k}" for k in range(feats.shape[1])]
    if labels is not None:
        header = ["label", *header]
        rows = ([int(y), *lo, *fe] for y, lo, fe in zip(labels, logits, feats))
    else:
        rows = ([*lo, *fe] for lo, fe in zip(logits, feats))
    return write_csv(path, header, rows)
