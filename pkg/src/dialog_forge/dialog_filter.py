"""Two-stage candidate filtering (score median, match frequency) and assembly.

Stage one drops every match scoring below the median of all combined scores;
using the median instead of a hand-tuned constant keeps the pipeline portable
across corpora. Stage two counts how often each surviving image was matched
and drops images above a percentile of that count distribution: images that
match everything (memes, text graphics) carry no signal worth attaching.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .matcher import CandidateEntry, CandidateSet, PipelineConfig
from .source_filter import Dialogue, dialogue_from_dict, dialogue_to_dict
from .util import read_jsonl, write_jsonl


@dataclass
class StageCounts:
    entries_before: int
    entries_after: int
    images_before: int
    images_after: int


@dataclass
class FilterStats:
    """Realized thresholds and shrinkage of both filter stages."""

    tau1: float
    frequency_threshold: float
    score_stage: StageCounts
    frequency_stage: StageCounts

    def as_dict(self) -> dict:
        return {
            "tau1": self.tau1,
            "frequency_threshold": self.frequency_threshold,
            "score_stage": vars(self.score_stage),
            "frequency_stage": vars(self.frequency_stage),
        }


@dataclass
class MatchedDialogue:
    """A dialogue plus ranked per-turn image attachments."""

    dialogue: Dialogue
    attachments: dict[int, list[tuple[str, float]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n_turns = len(self.dialogue.turns)
        for turn_index, images in self.attachments.items():
            if not 0 <= turn_index < n_turns:
                raise ValueError(
                    f"attachment on turn {turn_index} of a {n_turns}-turn dialogue "
                    f"({self.dialogue.dialogue_id!r})"
                )
            ids = [image_id for image_id, _ in images]
            if len(set(ids)) != len(ids):
                raise ValueError(
                    f"duplicate image on turn {turn_index} of {self.dialogue.dialogue_id!r}"
                )
            scores = [score for _, score in images]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ValueError(
                    f"attachments on turn {turn_index} of "
                    f"{self.dialogue.dialogue_id!r} are not sorted by score"
                )

    def total_attachments(self) -> int:
        return sum(len(v) for v in self.attachments.values())

    def as_dict(self) -> dict:
        row = dialogue_to_dict(self.dialogue)
        row["attachments"] = {
            str(turn): [{"image_id": image_id, "score": score} for image_id, score in images]
            for turn, images in sorted(self.attachments.items())
        }
        return row

    @classmethod
    def from_dict(cls, row: dict) -> "MatchedDialogue":
        attachments = {
            int(turn): [(str(a["image_id"]), float(a["score"])) for a in images]
            for turn, images in row.get("attachments", {}).items()
        }
        return cls(dialogue=dialogue_from_dict(row), attachments=attachments)


def load_matched(path: str | Path) -> list[MatchedDialogue]:
    return [MatchedDialogue.from_dict(row) for row in read_jsonl(path)]


def save_matched(path: str | Path, dataset: Iterable[MatchedDialogue]) -> int:
    return write_jsonl(path, (md.as_dict() for md in dataset))


def compute_tau1(candidates: CandidateSet) -> float:
    """Exact median of all combined scores.

    For even counts this is the lower of the two middle order statistics, so
    the threshold is always a score that actually occurred.

    Raises:
        ValueError: empty candidate set.
    """
    if not candidates.entries:
        raise ValueError("cannot take the median of an empty candidate set")
    scores = np.sort(np.array([e.combined for e in candidates.entries], dtype=np.float64))
    return float(scores[(scores.size - 1) // 2])


def apply_score_filter(candidates: CandidateSet, tau1: float) -> CandidateSet:
    """Keep entries with combined score >= tau1; order is preserved."""
    if not math.isfinite(tau1):
        raise ValueError(f"tau1 must be finite, got {tau1}")
    kept = [e for e in candidates.entries if e.combined >= tau1]
    return CandidateSet(entries=kept, k=candidates.k)


def nearest_rank_cut(counts: Sequence[int], percentile: float) -> int:
    """Nearest-rank percentile of a count distribution (no interpolation)."""
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    ordered = sorted(counts)
    if not ordered:
        raise ValueError("empty count distribution")
    rank = math.ceil(percentile / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def match_counts(candidates: CandidateSet) -> Counter:
    return Counter(e.image_id for e in candidates.entries)


def apply_frequency_filter(candidates: CandidateSet, percentile: float) -> CandidateSet:
    """Drop entries of images matched more often than the percentile cut.

    An image is kept iff its match count is <= the nearest-rank percentile
    of the per-image count distribution, so everything tied at the cut
    survives and percentile 100 is the identity.
    """
    if not candidates.entries:
        return CandidateSet(entries=[], k=candidates.k)
    counts = match_counts(candidates)
    cut = nearest_rank_cut(list(counts.values()), percentile)
    kept = [e for e in candidates.entries if counts[e.image_id] <= cut]
    return CandidateSet(entries=kept, k=candidates.k)


def run_filters(
    candidates: CandidateSet, config: PipelineConfig
) -> tuple[CandidateSet, FilterStats]:
    """Score filter then frequency filter, with before/after accounting.

    Frequency counting happens after the score stage so that rejected
    matches cannot inflate an image's frequency.
    """
    tau1 = compute_tau1(candidates)
    scored = apply_score_filter(candidates, tau1)
    score_stage = StageCounts(
        entries_before=len(candidates.entries),
        entries_after=len(scored.entries),
        images_before=len({e.image_id for e in candidates.entries}),
        images_after=len({e.image_id for e in scored.entries}),
    )

    counts = match_counts(scored)
    cut = nearest_rank_cut(list(counts.values()), config.tau2_percentile) if counts else 0
    final = apply_frequency_filter(scored, config.tau2_percentile)
    frequency_stage = StageCounts(
        entries_before=len(scored.entries),
        entries_after=len(final.entries),
        images_before=len(counts),
        images_after=len({e.image_id for e in final.entries}),
    )

    stats = FilterStats(
        tau1=tau1,
        frequency_threshold=float(cut),
        score_stage=score_stage,
        frequency_stage=frequency_stage,
    )
    return final, stats


@dataclass
class AssemblyResult:
    matched: list[MatchedDialogue]
    unmatched_dialogue_ids: list[str]

    def as_report(self) -> dict:
        return {
            "dialogues_with_images": len(self.matched),
            "dialogues_without_images": len(self.unmatched_dialogue_ids),
            "unmatched_dialogue_ids": self.unmatched_dialogue_ids,
            "attachments_total": sum(md.total_attachments() for md in self.matched),
        }


def assemble_dataset(
    dialogues: Sequence[Dialogue],
    candidates: CandidateSet,
    config: PipelineConfig,
) -> AssemblyResult:
    """Attach surviving candidates to their turns, capped per utterance.

    Dialogues whose turns kept no candidates are excluded from the matched
    dataset but listed in the result so nothing silently disappears. Output
    preserves input dialogue order.

    Raises:
        KeyError: a candidate referencing an unknown dialogue_id.
        ValueError: a candidate referencing a turn the dialogue lacks.
    """
    by_id = {d.dialogue_id: d for d in dialogues}
    per_turn: dict[tuple[str, int], list[CandidateEntry]] = candidates.per_utterance()

    attachments: dict[str, dict[int, list[tuple[str, float]]]] = {}
    for (dialogue_id, turn_index), entries in per_turn.items():
        dialogue = by_id.get(dialogue_id)
        if dialogue is None:
            raise KeyError(f"candidate references unknown dialogue {dialogue_id!r}")
        if not 0 <= turn_index < len(dialogue.turns):
            raise ValueError(
                f"candidate references turn {turn_index} of "
                f"{len(dialogue.turns)}-turn dialogue {dialogue_id!r}"
            )
        # Re-rank rather than trusting file order; same tie rule as matching.
        ranked = sorted(entries, key=lambda e: (-e.combined, e.image_id))
        top = ranked[: config.max_images_per_utterance]
        attachments.setdefault(dialogue_id, {})[turn_index] = [
            (e.image_id, e.combined) for e in top
        ]

    matched: list[MatchedDialogue] = []
    unmatched: list[str] = []
    for dialogue in dialogues:
        turns = attachments.get(dialogue.dialogue_id)
        if turns:
            matched.append(MatchedDialogue(dialogue=dialogue, attachments=dict(sorted(turns.items()))))
        else:
            unmatched.append(dialogue.dialogue_id)
    return AssemblyResult(matched=matched, unmatched_dialogue_ids=unmatched)


def sweep_tau2(
    candidates: CandidateSet, percentiles: Sequence[float]
) -> list[dict]:
    """Retained links/images after the two-stage filter at each percentile.

    The score stage runs once; only the frequency knob varies. Retained
    counts are monotone non-decreasing in the percentile.
    """
    tau1 = compute_tau1(candidates)
    scored = apply_score_filter(candidates, tau1)
    rows = []
    for p in percentiles:
        filtered = apply_frequency_filter(scored, p)
        rows.append(
            {
                "tau2_percentile": float(p),
                "entries_retained": len(filtered.entries),
                "images_retained": len({e.image_id for e in filtered.entries}),
            }
        )
    return rows
