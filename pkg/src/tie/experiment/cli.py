"""``tie`` command line: train, eval, invert-dump and score.

Exit status is 0 on success, 2 for configuration or input problems and 1
when training aborts. ``TIE_THREADS`` caps the worker threads used for
scoring during evaluation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..models import load_checkpoint
from ..tieloop import MODES, TrainingAborted
from .artifacts import read_manifest
from .config import ConfigError, ExperimentConfig, load_config, load_datasets, parse_config
from .runner import evaluate_checkpoint, export_logits, invert_dump, score_logits_csv, train

log = logging.getLogger("tie")


def _config_from_args(args) -> ExperimentConfig:
    if args.manifest:
        m = read_manifest(args.manifest)
        cfg = parse_config(m["config"])
        if cfg.config_hash() != m["config_hash"]:
            raise ConfigError(f"{args.manifest}: config hash mismatch, the manifest was edited")
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("pass --config PATH or --manifest PATH")
    return cfg.with_overrides(seed=args.seed, mode=args.mode)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    res = train(cfg, args.out)
    last = res.run.history[-1]
    print(f"trained {len(res.run.history)} epochs, tau={last.tau:.6g}, garbage={last.garbage_size}; "
          f"artifacts in {res.out_dir}")
    for name, value in res.evaluation.accuracy.items():
        print(f"  {name}: {value:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    ev = evaluate_checkpoint(args.checkpoint, cfg, args.out)
    for m in ev.metrics:
        vals = "N/A" if m.auroc is None else f"auroc={m.auroc:.4f} aupr={m.aupr:.4f} fpr95={m.fpr95:.4f}"
        print(f"{m.ood_set:>16s} {m.score:>12s}  pos={m.n_pos:5d} neg={m.n_neg:5d}  {vals}")
    return 0


def cmd_invert_dump(args) -> int:
    paths = invert_dump(args.checkpoint, args.per_class, args.out, args.seed or 0)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def cmd_score(args) -> int:
    path = score_logits_csv(args.input, args.output, args.fit, args.energy_temperature)
    print(f"wrote {path}")
    return 0


def cmd_export_logits(args) -> int:
    cfg = _config_from_args(args)
    clf, _, _ = load_checkpoint(args.checkpoint)
    data = load_datasets(cfg)
    sets = {"train": data.train, "test": data.test, **data.ood}
    if args.split not in sets:
        raise ConfigError(f"unknown split {args.split!r}; choose from {sorted(sets)}")
    ds = sets[args.split]
    print(f"wrote {export_logits(clf, ds.samples, args.output, ds.labels if args.with_labels else None)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tie", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_flags(p, need_out=True):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--manifest", help="replay the config recorded in a run manifest")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--mode", choices=MODES, help="override the training mode")
        if need_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run the training loop and write all artifacts")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test and OOD sets")
    run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("invert-dump", help="write generated samples per class (PGM grids or CSV points)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert_dump)

    p = sub.add_parser("score", help="score exported logits/features CSV")
    p.add_argument("--input", required=True, help="CSV with logit_<k> (garbage last) and optional feat_<k>")
    p.add_argument("--output", required=True)
    p.add_argument("--fit", help="labelled training features CSV for Mahalanobis scoring")
    p.add_argument("--energy-temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-logits", help="write logits and features of a split to CSV")
    run_flags(p, need_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", help="train, test or an OOD set name")
    p.add_argument("--with-labels", action="store_true")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export_logits)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"tie: training aborted: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"tie: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
