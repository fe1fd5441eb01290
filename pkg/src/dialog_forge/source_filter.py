"""Source data filtering: dialogue dedup, pair thresholding, and splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed_store import EmbeddingStore, cosine
from .textproc import normalize_key
from .util import read_jsonl, write_jsonl

DEFAULT_PAIR_THRESHOLD = 0.185
DEFAULT_SPLIT_RATIO = (5, 1, 1)

SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True)
class Turn:
    speaker: int
    text: str


@dataclass
class Dialogue:
    """A multi-turn text dialogue. Turn indices are 0-based throughout."""

    dialogue_id: str
    turns: list[Turn]
    source: str = ""
    skill: str | None = None

    def __post_init__(self) -> None:
        if not self.dialogue_id:
            raise ValueError("dialogue_id must be non-empty")
        if not self.turns:
            raise ValueError(f"dialogue {self.dialogue_id!r} has no turns")
        for i, turn in enumerate(self.turns):
            if not turn.text.strip():
                raise ValueError(f"dialogue {self.dialogue_id!r} turn {i} is empty")

    def texts(self) -> list[str]:
        return [t.text for t in self.turns]


def utterance_id(dialogue_id: str, turn_index: int) -> str:
    """Stable key naming one utterance; embedding stores use these as row ids."""
    return f"{dialogue_id}::{turn_index}"


def parse_utterance_id(key: str) -> tuple[str, int]:
    dialogue_id, _, idx = key.rpartition("::")
    if not dialogue_id:
        raise ValueError(f"malformed utterance id {key!r}")
    return dialogue_id, int(idx)


@dataclass(frozen=True)
class ImageCaptionPair:
    image_id: str
    caption: str
    content_hash: str | None = None


@dataclass
class SplitAssignment:
    """Disjoint, exhaustive train/valid/test id sets plus the seed used."""

    seed: int
    train: list[str]
    valid: list[str]
    test: list[str]

    def as_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "valid": self.valid, "test": self.test}

    def split_of(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name in SPLIT_NAMES:
            for id_ in getattr(self, name):
                out[id_] = name
        return out


def dedup_dialogues(dialogues: Sequence[Dialogue]) -> list[Dialogue]:
    """Drop exact duplicates under a normalized-text key, keeping the first.

    The key is the lowercased, whitespace-collapsed concatenation of turn
    texts, so dialogues differing only in case or spacing collapse together.
    Input order is preserved. Idempotent.
    """
    seen: set[str] = set()
    kept: list[Dialogue] = []
    for dialogue in dialogues:
        key = normalize_key(" ".join(dialogue.texts()))
        if key in seen:
            continue
        seen.add(key)
        kept.append(dialogue)
    return kept


def dedup_pairs_by_hash(pairs: Sequence[ImageCaptionPair]) -> list[ImageCaptionPair]:
    """Remove exact-duplicate images by content hash, keeping first occurrence.

    Pairs without a hash are never treated as duplicates of anything; the
    engine does not touch pixels, so hashes must come from the caller.
    """
    seen: set[str] = set()
    kept: list[ImageCaptionPair] = []
    for pair in pairs:
        if pair.content_hash is not None:
            if pair.content_hash in seen:
                continue
            seen.add(pair.content_hash)
        kept.append(pair)
    return kept


def filter_image_caption_pairs(
    pairs: Sequence[ImageCaptionPair],
    image_store: EmbeddingStore,
    caption_store: EmbeddingStore,
    threshold: float = DEFAULT_PAIR_THRESHOLD,
) -> list[str]:
    """Keep image ids whose image-caption cosine is at or above the threshold.

    Exact duplicates (by content hash) are removed first. Pairs scoring
    strictly below the threshold are filtered out, so a pair sitting exactly
    at the threshold survives.

    Raises:
        KeyError: a pair id missing from either store.
    """
    kept: list[str] = []
    for pair in dedup_pairs_by_hash(pairs):
        if pair.image_id not in image_store:
            raise KeyError(f"image id {pair.image_id!r} not in image store")
        if pair.image_id not in caption_store:
            raise KeyError(f"image id {pair.image_id!r} not in caption store")
        score = cosine(image_store.vector(pair.image_id), caption_store.vector(pair.image_id))
        if score >= threshold:
            kept.append(pair.image_id)
    return kept


def split_pairs(
    ids: Sequence[str],
    ratio: tuple[int, int, int] = DEFAULT_SPLIT_RATIO,
    seed: int = 0,
) -> SplitAssignment:
    """Shuffle ids with a seeded RNG and cut into train/valid/test.

    Cuts fall at floor(n * r_train / total) and floor(n * (r_train + r_valid)
    / total); the remainder goes to test. Deterministic for a given seed.

    Raises:
        ValueError: duplicate ids or a non-positive ratio component.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError(f"ratio must be three positive integers, got {ratio}")

    n = len(ids)
    total = sum(ratio)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut1 = n * ratio[0] // total
    cut2 = n * (ratio[0] + ratio[1]) // total
    shuffled = [ids[i] for i in order]
    return SplitAssignment(
        seed=seed,
        train=shuffled[:cut1],
        valid=shuffled[cut1:cut2],
        test=shuffled[cut2:],
    )


# --- JSON-lines wire formats ---


def dialogue_from_dict(row: dict) -> Dialogue:
    turns = [Turn(speaker=int(t["speaker"]), text=str(t["text"])) for t in row["turns"]]
    return Dialogue(
        dialogue_id=str(row["dialogue_id"]),
        turns=turns,
        source=str(row.get("source", "")),
        skill=row.get("skill"),
    )


def dialogue_to_dict(dialogue: Dialogue) -> dict:
    row: dict = {
        "dialogue_id": dialogue.dialogue_id,
        "source": dialogue.source,
        "turns": [{"speaker": t.speaker, "text": t.text} for t in dialogue.turns],
    }
    if dialogue.skill is not None:
        row["skill"] = dialogue.skill
    return row


def load_dialogues(path: str | Path) -> list[Dialogue]:
    dialogues = [dialogue_from_dict(row) for row in read_jsonl(path)]
    seen: set[str] = set()
    for dialogue in dialogues:
        if dialogue.dialogue_id in seen:
            raise ValueError(f"duplicate dialogue_id {dialogue.dialogue_id!r} in {path}")
        seen.add(dialogue.dialogue_id)
    return dialogues


def save_dialogues(path: str | Path, dialogues: Iterable[Dialogue]) -> int:
    return write_jsonl(path, (dialogue_to_dict(d) for d in dialogues))


def pair_from_dict(row: dict) -> ImageCaptionPair:
    return ImageCaptionPair(
        image_id=str(row["image_id"]),
        caption=str(row["caption"]),
        content_hash=row.get("content_hash"),
    )


def load_pairs(path: str | Path) -> list[ImageCaptionPair]:
    pairs = [pair_from_dict(row) for row in read_jsonl(path)]
    seen: set[str] = set()
    for pair in pairs:
        if pair.image_id in seen:
            raise ValueError(f"duplicate image_id {pair.image_id!r} in {path}")
        seen.add(pair.image_id)
    return pairs
