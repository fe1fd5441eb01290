"""Shared fixture builders and independent reference implementations.

The reference implementations here deliberately avoid the library's own code
paths (plain loops, literal formulas) so tests compare two independent
routes to the same answer.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path

import numpy as np

from dialog_forge.embed_store import EmbeddingStore
from dialog_forge.source_filter import Dialogue, Turn, utterance_id

WORDS = (
    "river mountain dog cat guitar coffee train garden winter photo song market "
    "bridge breakfast painting soccer library sunset cheese bicycle island lantern "
    "harbor meadow violin pepper castle lantern orchid thunder velvet marble"
).split()


def store_from(ids, vectors) -> EmbeddingStore:
    return EmbeddingStore.from_arrays(ids, np.asarray(vectors, dtype=np.float32))


def random_store(rng: np.random.Generator, prefix: str, count: int, dim: int) -> EmbeddingStore:
    vectors = rng.normal(size=(count, dim)).astype(np.float32)
    ids = [f"{prefix}{i:06d}" for i in range(count)]
    return store_from(ids, vectors)


def make_dialogue(dialogue_id: str, texts, source: str = "synthetic", skill=None) -> Dialogue:
    return Dialogue(
        dialogue_id=dialogue_id,
        turns=[Turn(speaker=i % 2, text=t) for i, t in enumerate(texts)],
        source=source,
        skill=skill,
    )


def random_dialogues(rng: np.random.Generator, n: int, min_turns: int = 2, max_turns: int = 6):
    dialogues = []
    for i in range(n):
        n_turns = int(rng.integers(min_turns, max_turns + 1))
        texts = [
            " ".join(rng.choice(WORDS, size=int(rng.integers(3, 9))))
            for _ in range(n_turns)
        ]
        dialogues.append(make_dialogue(f"d{i:05d}", texts))
    return dialogues


# --- independent references ---


def reference_combined(s_ui, s_uc, mean_ui, std_ui, mean_uc, std_uc, alpha):
    return alpha * ((s_ui - mean_ui) / std_ui) + (1 - alpha) * ((s_uc - mean_uc) / std_uc)


def brute_force_topk(utt_store, img_store, cap_store, stats, alpha, k):
    """Dense argsort over the full grid with the documented tie rule."""
    results = {}
    for row, key in enumerate(utt_store.ids):
        u = np.asarray(utt_store.vectors[row], dtype=np.float64)
        scored = []
        for col, image_id in enumerate(img_store.ids):
            vi = np.asarray(img_store.vectors[col], dtype=np.float64)
            vc = np.asarray(cap_store.vectors[col], dtype=np.float64)
            s_ui = float(np.dot(u, vi) / (np.linalg.norm(u) * np.linalg.norm(vi)))
            s_uc = float(np.dot(u, vc) / (np.linalg.norm(u) * np.linalg.norm(vc)))
            combined = reference_combined(
                s_ui, s_uc, stats.mean_ui, stats.std_ui, stats.mean_uc, stats.std_uc, alpha
            )
            scored.append((image_id, s_ui, s_uc, combined))
        scored.sort(key=lambda item: (-item[3], item[0]))
        results[key] = scored[:k]
    return results


def reference_bm25_scores(docs: dict[str, list[str]], query_terms, k1=1.2, b=0.75):
    """Literal Okapi formula with the smoothed IDF, token lists in, id->score out."""
    n = len(docs)
    avgdl = sum(len(t) for t in docs.values()) / n
    df = Counter()
    for terms in docs.values():
        for term in set(terms):
            df[term] += 1
    scores = {}
    for doc_id, terms in docs.items():
        counts = Counter(terms)
        dl = len(terms)
        score = 0.0
        for term in query_terms:
            f = counts.get(term, 0)
            if f == 0:
                continue
            idf = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
            score += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * dl / avgdl))
        scores[doc_id] = score
    return scores


# --- end-to-end fixture generation ---


def build_pipeline_fixture(
    root: Path,
    n_dialogues: int,
    n_images: int,
    dim: int,
    seed: int = 7,
    config_overrides: dict | None = None,
) -> Path:
    """Write synthetic dialogues, pairs, stores, and a config; returns config path."""
    from dialog_forge.embed_store import write_store

    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    dialogues = random_dialogues(rng, n_dialogues)
    with open(root / "dialogues.jsonl", "w", encoding="utf-8") as f:
        for d in dialogues:
            row = {
                "dialogue_id": d.dialogue_id,
                "source": d.source,
                "turns": [{"speaker": t.speaker, "text": t.text} for t in d.turns],
            }
            f.write(json.dumps(row) + "\n")

    utt_ids = [utterance_id(d.dialogue_id, j) for d in dialogues for j in range(len(d.turns))]
    write_store(
        utt_ids, rng.normal(size=(len(utt_ids), dim)).astype(np.float32), root / "utt.embs"
    )

    image_ids = [f"img{i:06d}" for i in range(n_images)]
    image_vecs = rng.normal(size=(n_images, dim)).astype(np.float32)
    # Captions correlate with their image so most pairs clear the threshold.
    caption_vecs = (image_vecs + 0.3 * rng.normal(size=(n_images, dim))).astype(np.float32)
    write_store(image_ids, image_vecs, root / "img.embs")
    write_store(image_ids, caption_vecs, root / "cap.embs")

    with open(root / "pairs.jsonl", "w", encoding="utf-8") as f:
        for i, image_id in enumerate(image_ids):
            caption = " ".join(rng.choice(WORDS, size=5))
            f.write(json.dumps({"image_id": image_id, "caption": caption}) + "\n")

    config = {
        "seed": 1,
        "alpha": 0.5,
        "k": 20,
        "tau2_percentile": 75,
        "max_images_per_utterance": 10,
        "image_caption_threshold": 0.185,
        "split_ratio": [5, 1, 1],
        "build_split": "train",
        "threads": 1,
        "block_size": 256,
        "inputs": {
            "dialogues": "dialogues.jsonl",
            "pairs": "pairs.jsonl",
            "utterance_store": "utt.embs",
            "image_store": "img.embs",
            "caption_store": "cap.embs",
        },
        "out": "out",
    }
    config.update(config_overrides or {})
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return config_path
