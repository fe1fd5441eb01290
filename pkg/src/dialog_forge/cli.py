"""Command-line front end.

One JSON config file drives a run; individual flags override config keys.
Subcommands expose each stage so partial re-runs compose into exactly what
``run`` would have produced. Log verbosity comes from the DIALOG_FORGE_LOG
environment variable (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .dialog_filter import load_matched
from .embed_store import open_store
from .eval_harness import PROTOCOLS, TASKS, evaluate
from .pipeline import (
    StageError,
    load_run_config,
    run_pipeline,
    stage_assemble,
    stage_filter,
    stage_filter_source,
    stage_ingest,
    stage_match,
    stage_stats,
    stage_stats_z,
    stage_sweep_tau2,
)
from .source_filter import load_pairs
from .textproc import load_stopwords, load_tsv_lexicon
from .util import write_json

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("DIALOG_FORGE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--alpha", type=float, default=None, help="override blend weight")
    parser.add_argument("--k", type=int, default=None, help="override per-utterance candidate cap")
    parser.add_argument(
        "--tau2-percentile", type=float, default=None, dest="tau2_percentile",
        help="override frequency-filter percentile",
    )
    parser.add_argument(
        "--max-images", type=int, default=None, dest="max_images_per_utterance",
        help="override attachments per utterance",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker threads (never changes outputs)")
    parser.add_argument("--out", default=None, help="override output directory")


def _resolve(args: argparse.Namespace):
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "alpha", "k", "tau2_percentile", "max_images_per_utterance", "threads", "out")
        if hasattr(args, key)
    }
    cfg = load_run_config(args.config, overrides)
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="dialog-forge",
        description="Build image-augmented dialogue datasets from embedding stores.",
    )
    parser.add_argument("--version", action="version", version=f"dialog-forge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    stage_commands = {
        "ingest": "validate inputs and record digests",
        "filter-source": "dedup dialogues, threshold pairs, split images",
        "stats-z": "compute z-score moments on the train partition",
        "match": "compute top-k candidates per utterance",
        "filter": "apply the score and frequency filters",
        "assemble": "attach images and write the matched dataset",
        "stats": "dataset and diversity statistics",
        "sweep-tau2": "retained-link report across frequency percentiles",
        "run": "execute every stage and write the run manifest",
    }
    for name, help_text in stage_commands.items():
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)

    eval_parser = sub.add_parser("eval", help="no-training retrieval evaluation")
    eval_parser.add_argument("--dataset", required=True, help="matched dataset JSONL")
    eval_parser.add_argument("--task", choices=TASKS + ("all",), default="all")
    eval_parser.add_argument("--protocol", choices=PROTOCOLS, default="candidates-100")
    eval_parser.add_argument("--ranker", choices=("bm25", "embed"), default="bm25")
    eval_parser.add_argument("--pairs", default=None, help="pair JSONL for captions (bm25 image task)")
    eval_parser.add_argument("--utterance-store", default=None)
    eval_parser.add_argument("--image-store", default=None)
    eval_parser.add_argument("--seed", type=int, default=0)
    eval_parser.add_argument("--pool-size", type=int, default=100)
    eval_parser.add_argument("--k1", type=float, default=1.2, help="BM25 k1")
    eval_parser.add_argument("--b", type=float, default=0.75, help="BM25 b")
    eval_parser.add_argument("--w-text", type=float, default=1.0)
    eval_parser.add_argument("--w-image", type=float, default=1.0)
    eval_parser.add_argument(
        "--perturb-ratio", type=float, default=0.0,
        help="replace this fraction of query words with synonyms (bm25 only)",
    )
    eval_parser.add_argument("--synonyms", default=None, help="TSV word<TAB>synonym lexicon")
    eval_parser.add_argument("--stopwords", default=None, help="newline-delimited stopword list")
    eval_parser.add_argument("--out", required=True, help="report JSON path")

    args = parser.parse_args(argv)

    try:
        if args.command == "eval":
            return _run_eval(args)
        cfg = _resolve(args)
        if args.command == "run":
            manifest = run_pipeline(cfg)
            completed = sum(1 for s in manifest["stages"] if s["status"] == "completed")
            print(f"run complete: {completed}/{len(manifest['stages'])} stages, out={cfg.out}")
            return 0
        stage_funcs = {
            "ingest": stage_ingest,
            "filter-source": stage_filter_source,
            "stats-z": stage_stats_z,
            "match": stage_match,
            "filter": stage_filter,
            "assemble": stage_assemble,
            "stats": stage_stats,
            "sweep-tau2": stage_sweep_tau2,
        }
        stage_funcs[args.command](cfg)
        print(f"{args.command}: done, out={cfg.out}")
        return 0
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1


def _run_eval(args: argparse.Namespace) -> int:
    dataset = load_matched(args.dataset)
    captions = None
    if args.pairs:
        captions = {p.image_id: p.caption for p in load_pairs(args.pairs)}
    utterance_store = open_store(args.utterance_store) if args.utterance_store else None
    image_store = open_store(args.image_store) if args.image_store else None
    synonyms = load_tsv_lexicon(args.synonyms) if args.synonyms else None
    stopwords = load_stopwords(args.stopwords) if args.stopwords else ()

    tasks = TASKS if args.task == "all" else (args.task,)
    if args.ranker == "bm25" and "image_retrieval" in tasks and captions is None:
        raise ValueError("image_retrieval with bm25 needs --pairs to supply captions")
    if args.ranker == "embed" and (utterance_store is None or image_store is None):
        raise ValueError("the embed ranker needs --utterance-store and --image-store")

    reports = []
    for task in tasks:
        report = evaluate(
            dataset,
            task,
            args.protocol,
            args.ranker,
            utterance_store=utterance_store,
            image_store=image_store,
            captions=captions,
            pool_size=args.pool_size,
            seed=args.seed,
            k1=args.k1,
            b=args.b,
            w_text=args.w_text,
            w_image=args.w_image,
            perturb_ratio=args.perturb_ratio,
            synonym_lexicon=synonyms,
            stopwords=stopwords,
        )
        reports.append(report.as_dict())
        recalls = ", ".join(f"R@{k}={v:.2f}" for k, v in sorted(report.recalls.items()))
        print(f"{task} [{args.protocol}, {args.ranker}] n={report.n}: {recalls}")
    write_json(args.out, reports if len(reports) > 1 else reports[0])
    return 0


if __name__ == "__main__":
    sys.exit(main())
