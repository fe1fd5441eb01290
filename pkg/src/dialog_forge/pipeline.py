"""Stage orchestration: wiring the filtering, matching, and stats stages.

Every stage reads either original inputs or artifacts a previous stage left
in the output directory, so subcommands composed by hand produce exactly the
bytes a full run produces. All randomness flows from the single config seed
through per-stage derived seeds.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .analytics import dataset_stats, diversity_stats
from .dialog_filter import (
    CandidateSet,
    assemble_dataset,
    load_matched,
    run_filters,
    save_matched,
    sweep_tau2,
)
from .embed_store import EmbeddingStore, open_store, validate_store
from .matcher import PipelineConfig, ZScoreStats, compute_zscore_stats, match_topk
from .source_filter import (
    SPLIT_NAMES,
    SplitAssignment,
    dedup_dialogues,
    filter_image_caption_pairs,
    load_dialogues,
    load_pairs,
    save_dialogues,
    split_pairs,
    utterance_id,
)
from .textproc import load_tsv_lexicon
from .util import derive_seed, read_json, sha256_file, write_json

log = logging.getLogger("dialog_forge")

STAGES = ("filter-source", "stats-z", "match", "filter", "assemble", "stats")

ARTIFACTS = {
    "dialogues_dedup": "dialogues_dedup.jsonl",
    "kept_images": "kept_images.json",
    "split": "split.json",
    "zscore_stats": "zscore_stats.json",
    "candidates": "candidates.jsonl",
    "filtered_candidates": "filtered_candidates.jsonl",
    "filter_stats": "filter_stats.json",
    "dataset": "dataset.jsonl",
    "assembly_report": "assembly_report.json",
    "dataset_stats": "dataset_stats.json",
    "diversity_stats": "diversity_stats.json",
    "ingest": "ingest.json",
    "tau2_sweep": "tau2_sweep.json",
    "manifest": "run_manifest.json",
}

_INPUT_KEYS = ("dialogues", "pairs", "utterance_store", "image_store", "caption_store")


@dataclass
class RunConfig:
    """Fully resolved configuration for one pipeline run."""

    pipeline: PipelineConfig
    dialogues: Path
    pairs: Path
    utterance_store: Path
    image_store: Path
    caption_store: Path
    out: Path
    image_caption_threshold: float = 0.185
    split_ratio: tuple[int, int, int] = (5, 1, 1)
    build_split: str = "train"
    threads: int = 1
    block_size: int = 256
    hypernym_lexicon: Path | None = None
    hypernym_min_count: int = 10

    def __post_init__(self) -> None:
        if self.build_split not in SPLIT_NAMES:
            raise ValueError(f"build_split must be one of {SPLIT_NAMES}, got {self.build_split!r}")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")
        if not math.isfinite(self.image_caption_threshold):
            raise ValueError("image_caption_threshold must be finite")

    def artifact(self, name: str) -> Path:
        return self.out / ARTIFACTS[name]

    def snapshot(self) -> dict:
        return {
            "alpha": self.pipeline.alpha,
            "k": self.pipeline.k,
            "tau2_percentile": self.pipeline.tau2_percentile,
            "max_images_per_utterance": self.pipeline.max_images_per_utterance,
            "zscore_sample_pairs": self.pipeline.zscore_sample_pairs,
            "seed": self.pipeline.seed,
            "image_caption_threshold": self.image_caption_threshold,
            "split_ratio": list(self.split_ratio),
            "build_split": self.build_split,
            "threads": self.threads,
            "block_size": self.block_size,
            "hypernym_min_count": self.hypernym_min_count,
            "inputs": {
                "dialogues": str(self.dialogues),
                "pairs": str(self.pairs),
                "utterance_store": str(self.utterance_store),
                "image_store": str(self.image_store),
                "caption_store": str(self.caption_store),
                "hypernym_lexicon": str(self.hypernym_lexicon) if self.hypernym_lexicon else None,
            },
            "out": str(self.out),
        }


def load_run_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse a JSON config file, apply flag overrides, validate everything.

    Validation happens here, before any stage runs, so a bad alpha or ratio
    never produces partial output.
    """
    raw = dict(read_json(path))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw.update({k: v for k, v in overrides.items() if k not in ("inputs",)})

    inputs = raw.get("inputs", {})
    missing = [key for key in _INPUT_KEYS if key not in inputs]
    if missing:
        raise ValueError(f"config missing inputs: {', '.join(missing)}")
    if "out" not in raw:
        raise ValueError("config missing 'out' directory")

    base = Path(path).parent

    def respath(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    pipeline = PipelineConfig(
        alpha=float(raw.get("alpha", 0.5)),
        k=int(raw.get("k", 100)),
        tau2_percentile=float(raw.get("tau2_percentile", 75.0)),
        max_images_per_utterance=int(raw.get("max_images_per_utterance", 10)),
        zscore_sample_pairs=(
            int(raw["zscore_sample_pairs"]) if raw.get("zscore_sample_pairs") else None
        ),
        seed=int(raw.get("seed", 0)),
    )
    ratio = tuple(int(r) for r in raw.get("split_ratio", (5, 1, 1)))
    if len(ratio) != 3:
        raise ValueError(f"split_ratio must have three components, got {ratio}")
    lexicon = raw.get("hypernym_lexicon")
    return RunConfig(
        pipeline=pipeline,
        dialogues=respath(inputs["dialogues"]),
        pairs=respath(inputs["pairs"]),
        utterance_store=respath(inputs["utterance_store"]),
        image_store=respath(inputs["image_store"]),
        caption_store=respath(inputs["caption_store"]),
        out=respath(raw["out"]),
        image_caption_threshold=float(raw.get("image_caption_threshold", 0.185)),
        split_ratio=ratio,  # type: ignore[arg-type]
        build_split=str(raw.get("build_split", "train")),
        threads=int(raw.get("threads", 1)),
        block_size=int(raw.get("block_size", 256)),
        hypernym_lexicon=respath(lexicon) if lexicon else None,
        hypernym_min_count=int(raw.get("hypernym_min_count", 10)),
    )


def _utterance_ids_for(dialogues) -> list[str]:
    return [
        utterance_id(d.dialogue_id, j) for d in dialogues for j in range(len(d.turns))
    ]


def _split_store(store: EmbeddingStore, ids: list[str]) -> EmbeddingStore:
    return store.select(ids)


def stage_ingest(cfg: RunConfig) -> dict:
    """Validate all inputs and record their digests; writes ingest.json."""
    dialogues = load_dialogues(cfg.dialogues)
    pairs = load_pairs(cfg.pairs)
    report: dict = {
        "dialogues": len(dialogues),
        "pairs": len(pairs),
        "stores": {},
        "inputs": {},
    }
    for key in _INPUT_KEYS:
        report["inputs"][key] = sha256_file(getattr(cfg, key))
    for name in ("utterance_store", "image_store", "caption_store"):
        store = open_store(getattr(cfg, name))
        validation = validate_store(store)
        report["stores"][name] = {
            "count": store.count,
            "dim": store.dim,
            "ok": validation.ok,
            "issues": [[row, code, msg] for row, code, msg in validation.issues],
        }
    write_json(cfg.artifact("ingest"), report)
    return report


def stage_filter_source(cfg: RunConfig) -> dict:
    dialogues = dedup_dialogues(load_dialogues(cfg.dialogues))
    save_dialogues(cfg.artifact("dialogues_dedup"), dialogues)

    pairs = load_pairs(cfg.pairs)
    image_store = open_store(cfg.image_store)
    caption_store = open_store(cfg.caption_store)
    kept = filter_image_caption_pairs(
        pairs, image_store, caption_store, threshold=cfg.image_caption_threshold
    )
    write_json(
        cfg.artifact("kept_images"),
        {
            "threshold": cfg.image_caption_threshold,
            "pairs_in": len(pairs),
            "kept": kept,
        },
    )

    split = split_pairs(kept, ratio=cfg.split_ratio, seed=derive_seed(cfg.pipeline.seed, "split"))
    write_json(cfg.artifact("split"), split.as_dict())
    log.info(
        "filter-source: %d dialogues kept, %d/%d images kept",
        len(dialogues),
        len(kept),
        len(pairs),
    )
    return {"dialogues": len(dialogues), "images_kept": len(kept)}


def _load_split(cfg: RunConfig) -> SplitAssignment:
    row = read_json(cfg.artifact("split"))
    return SplitAssignment(
        seed=int(row["seed"]),
        train=list(row["train"]),
        valid=list(row["valid"]),
        test=list(row["test"]),
    )


def stage_stats_z(cfg: RunConfig) -> dict:
    dialogues = load_dialogues(cfg.artifact("dialogues_dedup"))
    split = _load_split(cfg)
    utterance_store = open_store(cfg.utterance_store).select(_utterance_ids_for(dialogues))
    image_store = open_store(cfg.image_store).select(split.train)
    caption_store = open_store(cfg.caption_store).select(split.train)
    stats = compute_zscore_stats(utterance_store, image_store, caption_store, cfg.pipeline)
    write_json(cfg.artifact("zscore_stats"), stats.as_dict())
    log.info("stats-z: population %d pairs", stats.population_size)
    return stats.as_dict()


def stage_match(cfg: RunConfig) -> dict:
    dialogues = load_dialogues(cfg.artifact("dialogues_dedup"))
    split = _load_split(cfg)
    build_ids = getattr(split, cfg.build_split)
    utterance_store = open_store(cfg.utterance_store).select(_utterance_ids_for(dialogues))
    image_store = open_store(cfg.image_store).select(build_ids)
    caption_store = open_store(cfg.caption_store).select(build_ids)
    stats = ZScoreStats.from_dict(read_json(cfg.artifact("zscore_stats")))
    candidates = match_topk(
        utterance_store,
        image_store,
        caption_store,
        stats,
        cfg.pipeline,
        block_size=cfg.block_size,
        threads=cfg.threads,
    )
    n = candidates.to_jsonl(cfg.artifact("candidates"))
    log.info("match: %d candidate entries", n)
    return {"entries": n}


def stage_filter(cfg: RunConfig) -> dict:
    candidates = CandidateSet.from_jsonl(cfg.artifact("candidates"), k=cfg.pipeline.k)
    filtered, stats = run_filters(candidates, cfg.pipeline)
    filtered.to_jsonl(cfg.artifact("filtered_candidates"))
    write_json(cfg.artifact("filter_stats"), stats.as_dict())
    log.info(
        "filter: tau1=%.6f cut=%d, %d -> %d entries",
        stats.tau1,
        int(stats.frequency_threshold),
        stats.score_stage.entries_before,
        stats.frequency_stage.entries_after,
    )
    return stats.as_dict()


def stage_assemble(cfg: RunConfig) -> dict:
    dialogues = load_dialogues(cfg.artifact("dialogues_dedup"))
    candidates = CandidateSet.from_jsonl(cfg.artifact("filtered_candidates"), k=cfg.pipeline.k)
    result = assemble_dataset(dialogues, candidates, cfg.pipeline)
    save_matched(cfg.artifact("dataset"), result.matched)
    write_json(cfg.artifact("assembly_report"), result.as_report())
    log.info(
        "assemble: %d matched dialogues, %d without images",
        len(result.matched),
        len(result.unmatched_dialogue_ids),
    )
    return result.as_report()


def stage_stats(cfg: RunConfig) -> dict:
    dataset = load_matched(cfg.artifact("dataset"))
    report = dataset_stats(dataset)
    write_json(cfg.artifact("dataset_stats"), report.as_dict())
    out: dict = {"dataset_stats": report.as_dict()}
    if cfg.hypernym_lexicon is not None:
        captions = {p.image_id: p.caption for p in load_pairs(cfg.pairs)}
        lexicon = load_tsv_lexicon(cfg.hypernym_lexicon)
        diversity = diversity_stats(dataset, captions, lexicon, min_count=cfg.hypernym_min_count)
        write_json(cfg.artifact("diversity_stats"), diversity.as_dict())
        out["diversity_stats"] = diversity.as_dict()
    return out


def stage_sweep_tau2(cfg: RunConfig, percentiles=(25.0, 50.0, 75.0, 100.0)) -> list[dict]:
    candidates = CandidateSet.from_jsonl(cfg.artifact("candidates"), k=cfg.pipeline.k)
    rows = sweep_tau2(candidates, percentiles)
    write_json(cfg.artifact("tau2_sweep"), rows)
    return rows


_STAGE_FUNCS = {
    "filter-source": stage_filter_source,
    "stats-z": stage_stats_z,
    "match": stage_match,
    "filter": stage_filter,
    "assemble": stage_assemble,
    "stats": stage_stats,
}

_STAGE_OUTPUTS = {
    "filter-source": ("dialogues_dedup", "kept_images", "split"),
    "stats-z": ("zscore_stats",),
    "match": ("candidates",),
    "filter": ("filtered_candidates", "filter_stats"),
    "assemble": ("dataset", "assembly_report"),
    "stats": ("dataset_stats",),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[stage:{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute every stage in order and write the run manifest.

    Returns the manifest. Identical config and inputs produce identical
    output digests; only the recorded timings vary between runs.
    """
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "tool_version": __version__,
        "config": cfg.snapshot(),
        "inputs": {},
        "stages": [],
    }
    for key in _INPUT_KEYS:
        path = getattr(cfg, key)
        manifest["inputs"][key] = {"path": str(path), "sha256": sha256_file(path)}

    for stage in STAGES:
        started = time.perf_counter()
        try:
            _STAGE_FUNCS[stage](cfg)
        except Exception as exc:
            manifest["stages"].append({"name": stage, "status": "failed", "error": str(exc)})
            write_json(cfg.artifact("manifest"), manifest)
            raise StageError(stage, exc) from exc
        outputs = {}
        for name in _STAGE_OUTPUTS[stage]:
            path = cfg.artifact(name)
            if path.exists():
                outputs[name] = {"path": path.name, "sha256": sha256_file(path)}
        if stage == "stats" and cfg.artifact("diversity_stats").exists():
            path = cfg.artifact("diversity_stats")
            outputs["diversity_stats"] = {"path": path.name, "sha256": sha256_file(path)}
        manifest["stages"].append(
            {
                "name": stage,
                "status": "completed",
                "seconds": round(time.perf_counter() - started, 6),
                "outputs": outputs,
            }
        )

    write_json(cfg.artifact("manifest"), manifest)
    return manifest
