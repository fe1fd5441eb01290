"""Conformance against the engine: exported files must open and validate.

These tests read the exporter's output back with the engine's own store
reader (a test-only dependency); the packages share a file format, not code.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dialog_forge.embed_store import cosine, open_store, validate_store

from embed_exporter.cli import main
from embed_exporter.export import ExportJob, export_embeddings


def _jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_ten_text_export_conformance(tmp_path, capsys):
    rows = [{"id": f"u{j}", "text": f"utterance about topic {j}"} for j in range(10)]
    input_path = _jsonl(tmp_path / "texts.jsonl", rows)
    out = tmp_path / "utt.embs"

    code = main(
        ["--kind", "utterances", "--input", str(input_path), "--model", "hash-64", "--out", str(out)]
    )
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 10 and summary["dim"] == 64

    store = open_store(out)
    assert store.count == 10 and store.dim == 64
    assert validate_store(store).ok
    assert store.ids == [f"u{j}" for j in range(10)]

    # Re-export: every vector within the determinism tolerance.
    rerun = tmp_path / "utt2.embs"
    assert main(
        ["--kind", "utterances", "--input", str(input_path), "--model", "hash-64", "--out", str(rerun)]
    ) == 0
    second = open_store(rerun)
    for row in range(10):
        assert cosine(store.vectors[row], second.vectors[row]) >= 0.999999


def test_corrupt_image_skipped_and_reported(tmp_path, capsys):
    for j in range(3):
        Image.new("RGB", (20, 20), (40 * j, 10, 200 - 40 * j)).save(tmp_path / f"im{j}.png")
    (tmp_path / "im3.png").write_bytes(b"definitely not a png")
    rows = [{"image_id": f"im{j}", "path": f"im{j}.png"} for j in range(4)]
    input_path = _jsonl(tmp_path / "images.jsonl", rows)
    out = tmp_path / "img.embs"

    code = main(["--kind", "images", "--input", str(input_path), "--model", "hash-64", "--out", str(out)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 3
    assert [f["id"] for f in summary["failures"]] == ["im3"]

    store = open_store(out)
    assert store.count == 3
    assert validate_store(store).ok


def test_utterance_and_caption_stores_share_dim(tmp_path):
    texts = _jsonl(tmp_path / "t.jsonl", [{"id": "a", "text": "hello world"}])
    pairs = _jsonl(tmp_path / "p.jsonl", [{"image_id": "i0", "caption": "a red kite"}])
    export_embeddings(
        ExportJob(kind="utterances", input_path=texts, model_id="hash-48", out_path=tmp_path / "u.embs")
    )
    export_embeddings(
        ExportJob(kind="captions", input_path=pairs, model_id="hash-48", out_path=tmp_path / "c.embs")
    )
    u = open_store(tmp_path / "u.embs")
    c = open_store(tmp_path / "c.embs")
    assert u.dim == c.dim == 48
    assert validate_store(u).ok and validate_store(c).ok


def test_exported_store_drives_engine_cosine(tmp_path):
    pairs = [
        {"image_id": "i0", "caption": "a brown dog running"},
        {"image_id": "i1", "caption": "a brown dog sleeping"},
        {"image_id": "i2", "caption": "city skyline at night"},
    ]
    input_path = _jsonl(tmp_path / "pairs.jsonl", pairs)
    export_embeddings(
        ExportJob(kind="captions", input_path=input_path, model_id="hash-128", out_path=tmp_path / "c.embs")
    )
    store = open_store(tmp_path / "c.embs")
    similar = cosine(store.vector("i0"), store.vector("i1"))
    unrelated = cosine(store.vector("i0"), store.vector("i2"))
    assert similar > unrelated  # shared tokens dominate the hashed space
