import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from embed_exporter.export import ExportError, ExportJob, export_embeddings, read_text_rows
from embed_exporter.models import HashingEncoder, ModelLoadError, load_model
from embed_exporter.store_writer import write_store


def _jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def _job(tmp_path, kind, rows_or_path, model="hash-64", **kwargs) -> ExportJob:
    if isinstance(rows_or_path, Path):
        input_path = rows_or_path
    else:
        input_path = _jsonl(tmp_path / f"{kind}.jsonl", rows_or_path)
    return ExportJob(
        kind=kind,
        input_path=input_path,
        model_id=model,
        out_path=tmp_path / f"{kind}.embs",
        **kwargs,
    )


def test_caption_export_shape(tmp_path):
    rows = [{"image_id": f"img{j}", "caption": f"a photo number {j}"} for j in range(3)]
    summary = export_embeddings(_job(tmp_path, "captions", rows))
    assert summary.count == 3 and summary.dim == 64 and summary.failures == []
    manifest = (tmp_path / "captions.ids").read_text().splitlines()
    assert manifest == ["img0", "img1", "img2"]


def test_flat_text_rows_accepted(tmp_path):
    rows = [{"id": f"t{j}", "text": f"sample {j}"} for j in range(4)]
    summary = export_embeddings(_job(tmp_path, "utterances", rows))
    assert summary.count == 4


def test_dialogue_rows_expand_per_turn(tmp_path):
    rows = [
        {"dialogue_id": "d0", "turns": [{"speaker": 0, "text": "hi"}, {"speaker": 1, "text": "yo"}]},
        {"dialogue_id": "d1", "turns": [{"speaker": 0, "text": "hey"}]},
    ]
    path = _jsonl(tmp_path / "dialogues.jsonl", rows)
    assert [i for i, _ in read_text_rows(path, "utterances")] == ["d0::0", "d0::1", "d1::0"]
    summary = export_embeddings(_job(tmp_path, "utterances", path))
    assert summary.count == 3


def test_export_is_byte_deterministic(tmp_path):
    rows = [{"id": f"t{j}", "text": f"deterministic text {j}"} for j in range(10)]
    job1 = _job(tmp_path, "utterances", rows)
    export_embeddings(job1)
    first = (tmp_path / "utterances.embs").read_bytes()
    export_embeddings(job1)
    assert (tmp_path / "utterances.embs").read_bytes() == first


def _write_png(path: Path, color) -> None:
    Image.new("RGB", (24, 18), color).save(path, format="PNG")


def test_image_export_with_corrupt_file(tmp_path):
    for j, color in enumerate([(250, 10, 10), (10, 250, 10), (10, 10, 250), (90, 90, 90)]):
        _write_png(tmp_path / f"img{j}.png", color)
    (tmp_path / "img4.png").write_bytes(b"this is not an image")
    rows = [{"image_id": f"img{j}", "path": f"img{j}.png"} for j in range(5)]
    summary = export_embeddings(_job(tmp_path, "images", rows))
    assert summary.count == 4
    assert [i for i, _ in summary.failures] == ["img4"]
    manifest = (tmp_path / "images.ids").read_text().splitlines()
    assert manifest == ["img0", "img1", "img2", "img3"]


def test_all_images_unreadable_is_an_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"junk")
    rows = [{"image_id": "only", "path": "bad.png"}]
    with pytest.raises(ExportError, match="no image"):
        export_embeddings(_job(tmp_path, "images", rows))


def test_duplicate_input_ids_rejected(tmp_path):
    rows = [{"id": "same", "text": "a"}, {"id": "same", "text": "b"}]
    with pytest.raises(ExportError, match="duplicate"):
        export_embeddings(_job(tmp_path, "utterances", rows))


def test_empty_input_rejected(tmp_path):
    with pytest.raises(ExportError, match="no rows"):
        export_embeddings(_job(tmp_path, "captions", []))


def test_hash_model_parsing_and_errors():
    encoder = load_model("hash-32")
    assert encoder.dim == 32
    with pytest.raises(ModelLoadError):
        load_model("hash-0")


def test_model_load_failure(monkeypatch, tmp_path):
    import embed_exporter.models as models

    def boom(model_id, device=None):
        raise models.ModelLoadError(f"cannot load model {model_id!r}: offline")

    monkeypatch.setattr(models, "SentenceTransformerEncoder", boom)
    with pytest.raises(ModelLoadError, match="cannot load"):
        models.load_model("clip-ViT-B-32")


def test_empty_text_still_nonzero_norm():
    encoder = HashingEncoder(dim=16, model_id="hash-16")
    vec = encoder.encode_texts([""], batch_size=8)[0]
    assert np.linalg.norm(vec) > 0


def test_store_writer_validation(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_store(["a", "a"], np.zeros((2, 4), dtype=np.float32), tmp_path / "x.embs")
    with pytest.raises(ValueError, match="rows"):
        write_store(["a"], np.zeros((2, 4), dtype=np.float32), tmp_path / "x.embs")
