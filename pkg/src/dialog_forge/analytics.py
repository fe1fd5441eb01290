"""Scalability and diversity statistics for matched datasets."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

from .dialog_filter import MatchedDialogue
from .textproc import tokenize

DEFAULT_HYPERNYM_MIN_COUNT = 10

TOTAL = "total"


@dataclass
class SplitStats:
    unique_dialogues: int = 0
    avg_turns: float = 0.0
    unique_images: int = 0
    avg_images_per_dialogue: float = 0.0
    avg_images_per_utterance: float = 0.0

    def as_dict(self) -> dict:
        return vars(self)


@dataclass
class StatsReport:
    splits: dict[str, SplitStats]
    skill_counts: dict[str, int]  # conversational-skill tags are tallied, never computed

    def as_dict(self) -> dict:
        row: dict = {name: stats.as_dict() for name, stats in self.splits.items()}
        if self.skill_counts:
            row["skill_counts"] = dict(sorted(self.skill_counts.items()))
        return row


@dataclass
class DiversityReport:
    unique_words_dialogue: int
    unique_words_caption: int
    unique_words_total: int
    unique_hypernyms_dialogue: int
    unique_hypernyms_caption: int
    unique_hypernyms_total: int
    min_count: int

    def as_dict(self) -> dict:
        return vars(self)


def _split_row(dataset: Sequence[MatchedDialogue]) -> SplitStats:
    if not dataset:
        return SplitStats()
    dialogue_ids = {md.dialogue.dialogue_id for md in dataset}
    total_turns = sum(len(md.dialogue.turns) for md in dataset)
    image_ids = set()
    attachment_links = 0
    image_bearing_utterances = 0
    for md in dataset:
        for images in md.attachments.values():
            if images:
                image_bearing_utterances += 1
                attachment_links += len(images)
                image_ids.update(image_id for image_id, _ in images)
    n = len(dataset)
    return SplitStats(
        unique_dialogues=len(dialogue_ids),
        avg_turns=total_turns / n,
        unique_images=len(image_ids),
        avg_images_per_dialogue=attachment_links / n,
        avg_images_per_utterance=(
            attachment_links / image_bearing_utterances if image_bearing_utterances else 0.0
        ),
    )


def dataset_stats(
    dataset: Sequence[MatchedDialogue],
    split_of: Mapping[str, str] | None = None,
) -> StatsReport:
    """Per-split and total dataset statistics.

    ``split_of`` maps dialogue_id to a split label; dialogues without a label
    fall into the total row only. Images-per-utterance averages over
    utterances that carry at least one attachment; empty denominators yield
    0 rather than NaN.
    """
    splits: dict[str, list[MatchedDialogue]] = {}
    if split_of:
        for md in dataset:
            label = split_of.get(md.dialogue.dialogue_id)
            if label is not None:
                splits.setdefault(label, []).append(md)
    rows = {name: _split_row(members) for name, members in sorted(splits.items())}
    rows[TOTAL] = _split_row(dataset)
    skills = Counter(md.dialogue.skill for md in dataset if md.dialogue.skill)
    return StatsReport(splits=rows, skill_counts=dict(skills))


def diversity_stats(
    dataset: Sequence[MatchedDialogue],
    captions: Mapping[str, str],
    hypernym_lexicon: Mapping[str, str],
    min_count: int = DEFAULT_HYPERNYM_MIN_COUNT,
) -> DiversityReport:
    """Unique words and surviving hypernyms across dialogues and captions.

    Tokens map through a flat word-to-hypernym lexicon (one hypernym per
    word; sense disambiguation is out of scope). A hypernym survives only if
    its occurrences across dialogues and captions combined reach
    ``min_count``. Each attached image's caption is counted once no matter
    how many turns attach it. Word totals are union counts: a word seen in
    both sources contributes once.

    Raises:
        KeyError: an attached image with no caption in ``captions``.
    """
    dialogue_words: set[str] = set()
    caption_words: set[str] = set()
    dialogue_hyp_counts: Counter = Counter()
    caption_hyp_counts: Counter = Counter()

    for md in dataset:
        for text in md.dialogue.texts():
            for token in tokenize(text):
                dialogue_words.add(token)
                hypernym = hypernym_lexicon.get(token)
                if hypernym is not None:
                    dialogue_hyp_counts[hypernym] += 1

    attached_images = sorted(
        {
            image_id
            for md in dataset
            for images in md.attachments.values()
            for image_id, _ in images
        }
    )
    for image_id in attached_images:
        if image_id not in captions:
            raise KeyError(f"no caption for attached image {image_id!r}")
        for token in tokenize(captions[image_id]):
            caption_words.add(token)
            hypernym = hypernym_lexicon.get(token)
            if hypernym is not None:
                caption_hyp_counts[hypernym] += 1

    combined = dialogue_hyp_counts + caption_hyp_counts
    surviving = {h for h, c in combined.items() if c >= min_count}

    return DiversityReport(
        unique_words_dialogue=len(dialogue_words),
        unique_words_caption=len(caption_words),
        unique_words_total=len(dialogue_words | caption_words),
        unique_hypernyms_dialogue=len(surviving & set(dialogue_hyp_counts)),
        unique_hypernyms_caption=len(surviving & set(caption_hyp_counts)),
        unique_hypernyms_total=len(surviving),
        min_count=min_count,
    )
