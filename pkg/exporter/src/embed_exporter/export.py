"""Batch export of utterance, caption, and image embeddings."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Encoder, load_model
from .store_writer import write_store

log = logging.getLogger("embed_exporter")

KINDS = ("utterances", "captions", "images")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    kind: str
    input_path: Path
    model_id: str
    out_path: Path
    batch_size: int = 32
    device: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class ExportSummary:
    count: int
    dim: int
    failures: list[tuple[str, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "count": self.count,
            "dim": self.dim,
            "failures": [{"id": i, "reason": r} for i, r in self.failures],
        }


def _read_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def read_text_rows(path: Path, kind: str) -> list[tuple[str, str]]:
    """(id, text) rows. Accepts flat {"id","text"} rows, the engine's pair
    rows {"image_id","caption"}, and for utterances whole-dialogue rows,
    which expand to one text per turn keyed ``dialogue_id::turn``."""
    rows: list[tuple[str, str]] = []
    for lineno, row in _read_jsonl(path):
        if "id" in row and "text" in row:
            rows.append((str(row["id"]), str(row["text"])))
        elif "image_id" in row and "caption" in row:
            rows.append((str(row["image_id"]), str(row["caption"])))
        elif kind == "utterances" and "dialogue_id" in row and "turns" in row:
            for j, turn in enumerate(row["turns"]):
                rows.append((f"{row['dialogue_id']}::{j}", str(turn["text"])))
        else:
            raise ExportError(f"{path}:{lineno}: unrecognized {kind} row shape")
    return rows


def read_image_rows(path: Path) -> list[tuple[str, Path]]:
    """(image_id, file path) rows; relative paths resolve next to the input."""
    base = path.parent
    rows: list[tuple[str, Path]] = []
    for lineno, row in _read_jsonl(path):
        if "image_id" not in row or "path" not in row:
            raise ExportError(f"{path}:{lineno}: image rows need image_id and path")
        p = Path(str(row["path"]))
        rows.append((str(row["image_id"]), p if p.is_absolute() else base / p))
    return rows


def _check_unique(ids: list[str]) -> None:
    seen = set()
    for id_ in ids:
        if id_ in seen:
            raise ExportError(f"duplicate id {id_!r} in input")
        seen.add(id_)


def export_embeddings(job: ExportJob, encoder: Encoder | None = None) -> ExportSummary:
    """Run one export job and write the store plus id manifest.

    Rows are written in input order. Unreadable images are skipped and
    listed in the summary's failures; they are never zero-filled, so a
    validating reader can trust every row that made it into the store.

    Raises:
        ModelLoadError: the model identifier cannot be loaded.
        ExportError: malformed input, duplicate ids, or zero usable rows.
    """
    if encoder is None:
        encoder = load_model(job.model_id, device=job.device)

    failures: list[tuple[str, str]] = []
    if job.kind == "images":
        rows = read_image_rows(job.input_path)
        _check_unique([i for i, _ in rows])
        ids: list[str] = []
        vectors: list[np.ndarray] = []
        for image_id, image_path in rows:
            try:
                vec = encoder.encode_image(image_path)
            except Exception as exc:
                log.warning("skipping image %s: %s", image_id, exc)
                failures.append((image_id, str(exc)))
                continue
            ids.append(image_id)
            vectors.append(np.asarray(vec, dtype=np.float32))
        if not ids:
            raise ExportError("no image could be read; refusing to write an empty store")
        matrix = np.stack(vectors)
    else:
        text_rows = read_text_rows(job.input_path, job.kind)
        _check_unique([i for i, _ in text_rows])
        if not text_rows:
            raise ExportError(f"no rows in {job.input_path}")
        ids = [i for i, _ in text_rows]
        texts = [t for _, t in text_rows]
        chunks = [
            encoder.encode_texts(texts[start : start + job.batch_size], job.batch_size)
            for start in range(0, len(texts), job.batch_size)
        ]
        matrix = np.concatenate(chunks, axis=0)

    if matrix.shape[1] != encoder.dim:
        raise ExportError(
            f"model {encoder.model_id!r} produced dim {matrix.shape[1]}, expected {encoder.dim}"
        )
    write_store(ids, matrix, job.out_path)
    log.info("wrote %d x %d vectors to %s", len(ids), encoder.dim, job.out_path)
    return ExportSummary(count=len(ids), dim=int(matrix.shape[1]), failures=failures)
