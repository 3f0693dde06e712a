"""Command-line interface: ``petaug augment|train|evaluate|analyze|report``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 training,
6 I/O, 7 partial augmentation (back-translation failures).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

import torch

from .augment import write_augmented_jsonl
from .checkpoint import atomic_write_text
from .errors import (AnalysisError, AugmentationError, ConfigurationError, DataError, ReportError, TrainingError)
from .experiment import (ExperimentConfig, analyze_runs, augment_examples, build_results_table, evaluate_run,
                         find_runs, load_run, load_task, run_training)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_IO, EXIT_PARTIAL = 0, 3, 4, 5, 6, 7


def _load_config(args):
    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    if getattr(args, "method", None) is not None:
        overrides["method"] = args.method
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    return cfg.with_overrides(**overrides)


def cmd_augment(args):
    cfg = _load_config(args)
    task = load_task(cfg)
    corpus, failures = augment_examples(cfg, task.train)
    out = args.out if args.out.endswith(".jsonl") else os.path.join(args.out, "augmented.jsonl")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_augmented_jsonl(out, corpus)
    counts = Counter(a.method for a in corpus)
    print("records: " + ", ".join(f"{m}={counts[m]}" for m in sorted(counts)) + f" -> {out}")
    if failures:
        report = [{"language": f.language, "error": str(f)} for f in failures]
        atomic_write_text(out + ".errors.json", json.dumps(report, indent=2) + "\n")
        by_lang = Counter(f.language for f in failures)
        print("back-translation failures: " + ", ".join(f"{k}={v}" for k, v in sorted(by_lang.items())),
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    run_training(cfg, args.out)
    return EXIT_OK


def cmd_evaluate(args):
    rows = []
    for directory in find_runs(args.runs):
        run = load_run(directory)
        res = evaluate_run(run)
        rows.append({"run": directory, "accuracy": res.accuracy, "percent": res.percent,
                     "mean_entropy": res.mean_entropy})
        print(f"{directory}: accuracy {res.percent:.1f} mean_entropy {res.mean_entropy:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "evaluation.json"), json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_analyze(args):
    runs = find_runs(args.runs)
    result = analyze_runs(runs, args.out)
    for rep in result["similarity"]:
        print(f"similarity {rep['view']} {rep['kind']}: mean {rep['mean']:.4f} std {rep['std']:.4f} "
              f"({rep['n_pairs']} pairs, {rep['n_runs']} runs)")
    print(f"analysis written to {args.out}")
    return EXIT_PARTIAL if result["failures"] else EXIT_OK


def cmd_report(args):
    table = build_results_table(find_runs(args.runs))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "results.md"), table.to_markdown())
    atomic_write_text(os.path.join(args.out, "results.csv"), table.to_csv())
    print(table.to_markdown(), end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="petaug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("augment", help="write an augmented training corpus as JSONL")
    common(p)
    p.add_argument("--method", choices=["eda", "bt", "corrupt", "none"])
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train every seed and write run directories")
    common(p)
    p.add_argument("--method", choices=["eda", "bt", "corrupt", "none"])
    p.add_argument("--mode", choices=["finetune", "prefix", "lora", "probe"])
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "validation accuracy and entropy of trained runs"),
                                 ("analyze", cmd_analyze, "similarity, entropy, separation and embedding export"),
                                 ("report", cmd_report, "Markdown/CSV results table over runs")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("runs", nargs="+", help="run directories or train output directories")
        p.add_argument("--out", required=name != "evaluate", help="output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(int(os.environ.get("PETAUG_THREADS", "1")))
    try:
        return args.func(args)
    except Exception as exc:
        code, kind = _classify(exc)
        if code is None:
            raise
        print(f"petaug: {kind}: {exc}", file=sys.stderr)
        return code


def _classify(exc):
    for types, code, kind in (((ConfigurationError, AnalysisError), EXIT_CONFIG, "configuration error"),
                              ((DataError, ReportError), EXIT_DATA, "data error"),
                              (TrainingError, EXIT_TRAINING, "training error"),
                              (AugmentationError, EXIT_PARTIAL, "augmentation error"),
                              (OSError, EXIT_IO, "I/O error")):
        if isinstance(exc, types):
            return code, kind
    return None, None


if __name__ == "__main__":
    sys.exit(main())
