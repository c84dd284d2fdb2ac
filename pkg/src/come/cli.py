"""Command-line entry point: ``come <subcommand> ...``.

Exit codes: 0 success, 1 usage/data error, 2 training diverged (non-finite
value), 3 training ran but did not converge, 4 gradient check failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .config import dump_config, from_dict, load_config
from .expert import load_checkpoint
from .graphs import (DatasetError, build_splits, corpus_digest, generate_motif_corpus,
                     ingest_tu, load_jsonl, save_jsonl)
from .train import (VARIANTS, TrainingDiverged, evaluate, load_dataset, run_ablation, train)

log = logging.getLogger("come")

EXIT_DIVERGED = 2
EXIT_NOT_CONVERGED = 3
EXIT_GRADCHECK = 4


def _config(args):
    return load_config(args.config, args.set)


def _save_splits(splits, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        save_jsonl(getattr(splits, name), out / f"{name}.jsonl")
    stats = {"class_sizes": list(splits.stats.class_sizes),
             "imbalance_factor": float(splits.stats.imbalance_factor), **splits.meta}
    (out / "stats.json").write_text(json.dumps(stats, indent=2))


def cmd_gen_data(args) -> int:
    d = _config(args).data
    graphs = generate_motif_corpus(d.classes, d.per_class, d.noise, seed=d.seed,
                                   background=d.background, motifs=d.motifs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(graphs, out / "corpus.jsonl")
    splits = build_splits(graphs, d.imbalance, d.val_per_class, d.test_per_class, seed=d.seed,
                          shuffle_classes=d.shuffle_classes)
    _save_splits(splits, out)
    print(f"{len(graphs)} graphs, train class sizes {list(splits.stats.class_sizes)}, "
          f"sha256 {corpus_digest(graphs)[:12]}")
    return 0


def cmd_ingest(args) -> int:
    graphs, stats = ingest_tu(args.path, max_degree=args.max_degree)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(graphs, out / "corpus.jsonl")
    print(f"{len(graphs)} graphs, {stats.M} classes, sizes {list(stats.class_sizes)}")
    if args.imbalance is not None:
        splits = build_splits(graphs, args.imbalance, args.val_per_class, args.test_per_class,
                              seed=args.seed)
        _save_splits(splits, out)
        print(f"long-tailed train sizes {list(splits.stats.class_sizes)}")
    return 0


def _converged(history) -> bool:
    totals = [h["total"] for h in history]
    return bool(totals) and all(np.isfinite(totals)) and (len(totals) < 2 or totals[-1] < totals[0])


def cmd_train(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    splits = load_dataset(config)
    try:
        result = train(config, splits, out)
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    rows = report.metrics_rows("val", result.val)
    if result.test is not None:
        rows += report.metrics_rows("test", result.test)
        report.per_class_bars(result.test, splits.stats.class_sizes, out / "per_class.png")
    report.write_csv(rows, out / "summary.csv")
    report.loss_curves(result.history, out / "loss_curves.png")
    shown = result.test or result.val
    print(f"best epoch {result.best_epoch}; accuracy {shown.accuracy:.4f} "
          + " ".join(f"{g}={v:.3f}" for g, v in shown.groups.items()))
    if not _converged(result.history):
        print("training loss did not decrease", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return 0


def cmd_eval(args) -> int:
    bank, meta = load_checkpoint(args.checkpoint)
    counts = meta["class_sizes"]
    if args.data:
        graphs = load_jsonl(args.data)
    else:
        config = from_dict(meta["config"])
        graphs = getattr(load_dataset(config), args.split)
    m = evaluate(bank, graphs, counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(report.metrics_rows(args.split if not args.data else Path(args.data).stem, m),
                     out / "eval.csv")
    report.per_class_bars(m, counts, out / "eval_per_class.png")
    print(json.dumps(m.as_dict()))
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    variants = args.variants.split(",")
    rows = run_ablation(config, variants, seeds=tuple(range(args.seeds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(rows, out / "ablation.csv")
    report.ablation_bars(rows, out / "ablation.png")
    for r in rows:
        print(f"{r['variant']:8s} {r['accuracy']:.4f} (+/- {r['std']:.4f}) delta {r['delta']:+.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.instances, args.seed)
    ok = True
    for r in results:
        status = "pass" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{status} {r.kernel:22s} worst rel err {r.worst:.2e} over {r.instances} ({r.seconds:.1f}s)")
    if args.out:
        report.write_csv([dataclasses.asdict(r) for r in results], args.out)
    return 0 if ok else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="come", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config (see configs/default.yaml)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set data.noise=0.2")

    sp = sub.add_parser("gen-data", help="generate a motif corpus and long-tailed splits")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("ingest", help="convert a TU-format dataset to JSONL")
    sp.add_argument("path", help="directory holding the *_A.txt family of files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-degree", type=int, default=10)
    sp.add_argument("--imbalance", type=float, help="also write long-tailed splits")
    sp.add_argument("--val-per-class", type=int, default=10)
    sp.add_argument("--test-per-class", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train and write metrics, checkpoint, CSV and figures")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", help="JSONL split (default: rebuild from the stored config)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="component ablation over seeds")
    with_config(sp)
    sp.add_argument("--variants", default="M1,M2,M3,M4,M5,M6,M7",
                    help=f"comma-separated, from {', '.join(VARIANTS)}")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss kernel")
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--out", help="optional CSV of per-kernel results")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
