"""Utterance-image matching: z-score statistics, combined scores, top-k search.

Every utterance is scored against every image twice, once through the image
embedding and once through its caption embedding. The two similarity types
live on different scales (text and image embeddings occupy offset regions of
the shared space), so each is z-scored with moments taken from the training
partition before the two are linearly combined.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .embed_store import EmbeddingStore
from .moments import MomentAccumulator, ZeroVarianceError
from .source_filter import parse_utterance_id
from .util import derive_seed, read_jsonl, write_jsonl

_ZSTATS_BLOCK_ROWS = 128  # utterance rows per matrix product in stats mode


@dataclass(frozen=True)
class ZScoreStats:
    """Per-similarity-type moments for the modality-gap correction."""

    mean_ui: float
    std_ui: float
    mean_uc: float
    std_uc: float
    population_size: int
    computed_on: str = "train"
    sampled: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.computed_on != "train":
            raise ValueError(f"stats must come from the train partition, got {self.computed_on!r}")
        if self.population_size < 2:
            raise ValueError(f"population of {self.population_size} is too small")
        if not (self.std_ui > 0 and self.std_uc > 0):
            raise ZeroVarianceError(
                f"zero standard deviation (std_ui={self.std_ui}, std_uc={self.std_uc})"
            )

    def as_dict(self) -> dict:
        return {
            "mean_ui": self.mean_ui,
            "std_ui": self.std_ui,
            "mean_uc": self.mean_uc,
            "std_uc": self.std_uc,
            "population_size": self.population_size,
            "computed_on": self.computed_on,
            "sampled": self.sampled,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, row: Mapping) -> "ZScoreStats":
        return cls(
            mean_ui=float(row["mean_ui"]),
            std_ui=float(row["std_ui"]),
            mean_uc=float(row["mean_uc"]),
            std_uc=float(row["std_uc"]),
            population_size=int(row["population_size"]),
            computed_on=str(row.get("computed_on", "train")),
            sampled=bool(row.get("sampled", False)),
            seed=row.get("seed"),
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the matching and filtering stages."""

    alpha: float = 0.5
    k: int = 100
    tau2_percentile: float = 75.0
    max_images_per_utterance: int = 10
    zscore_sample_pairs: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if not 0.0 < self.tau2_percentile <= 100.0:
            raise ValueError(f"tau2_percentile must be in (0, 100], got {self.tau2_percentile}")
        if self.max_images_per_utterance < 1:
            raise ValueError(
                f"max_images_per_utterance must be positive, got {self.max_images_per_utterance}"
            )
        if self.zscore_sample_pairs is not None and self.zscore_sample_pairs < 2:
            raise ValueError("zscore_sample_pairs must be at least 2 when set")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


class CandidateEntry(NamedTuple):
    dialogue_id: str
    turn_index: int
    image_id: str
    s_ui: float
    s_uc: float
    combined: float


@dataclass
class CandidateSet:
    """Per-utterance top-k image candidates, utterance-major, rank order."""

    entries: list[CandidateEntry]
    k: int

    def per_utterance(self) -> dict[tuple[str, int], list[CandidateEntry]]:
        groups: dict[tuple[str, int], list[CandidateEntry]] = {}
        for entry in self.entries:
            groups.setdefault((entry.dialogue_id, entry.turn_index), []).append(entry)
        return groups

    def to_jsonl(self, path: str | Path) -> int:
        return write_jsonl(
            path,
            (
                {
                    "dialogue_id": e.dialogue_id,
                    "turn_index": e.turn_index,
                    "image_id": e.image_id,
                    "s_ui": e.s_ui,
                    "s_uc": e.s_uc,
                    "combined": e.combined,
                }
                for e in self.entries
            ),
        )

    @classmethod
    def from_jsonl(cls, path: str | Path, k: int) -> "CandidateSet":
        entries = [
            CandidateEntry(
                dialogue_id=str(row["dialogue_id"]),
                turn_index=int(row["turn_index"]),
                image_id=str(row["image_id"]),
                s_ui=float(row["s_ui"]),
                s_uc=float(row["s_uc"]),
                combined=float(row["combined"]),
            )
            for row in read_jsonl(path)
        ]
        return cls(entries=entries, k=k)


def combined_score(s_ui: float, s_uc: float, stats: ZScoreStats, alpha: float) -> float:
    """Linear blend of the two z-scored similarities."""
    z_ui = (s_ui - stats.mean_ui) / stats.std_ui
    z_uc = (s_uc - stats.mean_uc) / stats.std_uc
    return alpha * z_ui + (1.0 - alpha) * z_uc


def _normalized_f64(store: EmbeddingStore, name: str) -> np.ndarray:
    """Rows as unit float64 vectors; zero-norm or non-finite rows are errors."""
    mat = np.asarray(store.vectors, dtype=np.float64)
    if not np.isfinite(mat).all():
        bad = int(np.flatnonzero(~np.isfinite(mat).all(axis=1))[0])
        raise ValueError(f"{name} store row {bad} contains NaN or infinity")
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0.0).any():
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"{name} store row {bad} has zero norm")
    return mat / norms[:, None]


def _aligned_caption_matrix(
    image_store: EmbeddingStore,
    caption_store: EmbeddingStore,
    image_to_caption: Mapping[str, str] | None,
) -> np.ndarray:
    """Caption vectors reordered so row i pairs with image row i."""
    cap = _normalized_f64(caption_store, "caption")
    if image_to_caption is None:
        if caption_store.count != image_store.count:
            raise ValueError(
                f"caption store has {caption_store.count} rows for "
                f"{image_store.count} images and no image-to-caption map was given"
            )
        return cap
    rows = []
    for image_id in image_store.ids:
        caption_id = image_to_caption.get(image_id)
        if caption_id is None or caption_id not in caption_store:
            raise KeyError(f"missing caption for image {image_id!r}")
        rows.append(caption_store.row(caption_id))
    return cap[rows]


def compute_zscore_stats(
    utterance_store: EmbeddingStore,
    image_store: EmbeddingStore,
    caption_store: EmbeddingStore,
    config: PipelineConfig,
    image_to_caption: Mapping[str, str] | None = None,
) -> ZScoreStats:
    """Population moments of both similarity types over the training grid.

    The population is every (utterance, image) pair, or a seeded uniform
    sample of ``config.zscore_sample_pairs`` grid cells when that is set
    (flagged in the output so provenance is never ambiguous). Standard
    deviations are population (divide-by-n), accumulated per fixed-size
    block and merged in block order, so the result does not depend on
    chunking or parallelism.

    Raises:
        ValueError: empty stores or dimension mismatches.
        ZeroVarianceError: all similarities of either type are identical.
    """
    if utterance_store.count == 0 or image_store.count == 0:
        raise ValueError(
            "z-score population is empty "
            f"({utterance_store.count} utterances x {image_store.count} images); "
            "if this is the pipeline, the train split may have filtered to nothing"
        )
    if utterance_store.dim != image_store.dim:
        raise ValueError(
            f"utterance dim {utterance_store.dim} != image dim {image_store.dim}"
        )
    if utterance_store.dim != caption_store.dim:
        raise ValueError(
            f"utterance dim {utterance_store.dim} != caption dim {caption_store.dim}"
        )

    utt = _normalized_f64(utterance_store, "utterance")
    img = _normalized_f64(image_store, "image")
    cap = _aligned_caption_matrix(image_store, caption_store, image_to_caption)

    acc_ui = MomentAccumulator()
    acc_uc = MomentAccumulator()
    sample_seed: int | None = None

    if config.zscore_sample_pairs is None:
        for start in range(0, utt.shape[0], _ZSTATS_BLOCK_ROWS):
            block = utt[start : start + _ZSTATS_BLOCK_ROWS]
            acc_ui.add((block @ img.T).ravel())
            acc_uc.add((block @ cap.T).ravel())
        population = utterance_store.count * image_store.count
    else:
        sample_seed = derive_seed(config.seed, "zscore-sample")
        rng = np.random.default_rng(sample_seed)
        n_pairs = config.zscore_sample_pairs
        u_idx = rng.integers(0, utt.shape[0], size=n_pairs)
        i_idx = rng.integers(0, img.shape[0], size=n_pairs)
        acc_ui.add(np.einsum("ij,ij->i", utt[u_idx], img[i_idx]))
        acc_uc.add(np.einsum("ij,ij->i", utt[u_idx], cap[i_idx]))
        population = n_pairs

    mom_ui = acc_ui.finalize()
    mom_uc = acc_uc.finalize()
    if mom_ui.std == 0.0 or mom_uc.std == 0.0:
        raise ZeroVarianceError(
            "all similarities of one type are identical; z-scores are undefined"
        )
    return ZScoreStats(
        mean_ui=mom_ui.mean,
        std_ui=mom_ui.std,
        mean_uc=mom_uc.mean,
        std_uc=mom_uc.std,
        population_size=population,
        computed_on="train",
        sampled=config.zscore_sample_pairs is not None,
        seed=sample_seed,
    )


def _top_rows(combined: np.ndarray, k: int, id_rank: np.ndarray) -> np.ndarray:
    """Indices of the k best scores; ties broken by ascending image id."""
    m = combined.shape[0]
    if k < m:
        neg = -combined
        kth = np.partition(neg, k - 1)[k - 1]
        cand = np.flatnonzero(neg <= kth)  # keeps every potential tie at the cut
    else:
        cand = np.arange(m)
    order = np.lexsort((id_rank[cand], -combined[cand]))
    return cand[order[: min(k, m)]]


def match_topk(
    utterance_store: EmbeddingStore,
    image_store: EmbeddingStore,
    caption_store: EmbeddingStore,
    stats: ZScoreStats,
    config: PipelineConfig,
    *,
    block_size: int = 256,
    threads: int = 1,
    image_to_caption: Mapping[str, str] | None = None,
) -> CandidateSet:
    """Top-k images per utterance by combined score over the full grid.

    ``block_size`` and ``threads`` only schedule work: each utterance's
    scores are computed with a fixed-shape matrix-vector product against the
    full image set and blocks merge in index order, so the output is
    identical for any block size or thread count.

    Utterance ids must follow the ``dialogue_id::turn_index`` convention.

    Raises:
        ValueError: dimension mismatch between stores.
        KeyError: an image with no caption row.
    """
    if block_size < 1:
        raise ValueError("block_size must be positive")
    if threads < 1:
        raise ValueError("threads must be positive")
    if utterance_store.dim != image_store.dim:
        raise ValueError(
            f"utterance dim {utterance_store.dim} != image dim {image_store.dim}"
        )
    if utterance_store.dim != caption_store.dim:
        raise ValueError(
            f"utterance dim {utterance_store.dim} != caption dim {caption_store.dim}"
        )

    utt = _normalized_f64(utterance_store, "utterance")
    img = _normalized_f64(image_store, "image")
    cap = _aligned_caption_matrix(image_store, caption_store, image_to_caption)

    image_ids = image_store.ids
    id_rank = np.empty(len(image_ids), dtype=np.int64)
    id_rank[sorted(range(len(image_ids)), key=image_ids.__getitem__)] = np.arange(
        len(image_ids)
    )

    utterance_keys = [parse_utterance_id(key) for key in utterance_store.ids]
    inv_std_ui = 1.0 / stats.std_ui
    inv_std_uc = 1.0 / stats.std_uc

    def score_block(start: int) -> list[CandidateEntry]:
        entries: list[CandidateEntry] = []
        stop = min(start + block_size, utt.shape[0])
        for row in range(start, stop):
            u = utt[row]
            s_ui = img @ u
            s_uc = cap @ u
            combined = config.alpha * ((s_ui - stats.mean_ui) * inv_std_ui) + (
                1.0 - config.alpha
            ) * ((s_uc - stats.mean_uc) * inv_std_uc)
            dialogue_id, turn_index = utterance_keys[row]
            for col in _top_rows(combined, config.k, id_rank):
                entries.append(
                    CandidateEntry(
                        dialogue_id=dialogue_id,
                        turn_index=turn_index,
                        image_id=image_ids[col],
                        s_ui=float(s_ui[col]),
                        s_uc=float(s_uc[col]),
                        combined=float(combined[col]),
                    )
                )
        return entries

    starts = list(range(0, utt.shape[0], block_size))
    if threads == 1 or len(starts) <= 1:
        blocks = [score_block(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(score_block, starts))

    entries: list[CandidateEntry] = []
    for block in blocks:
        entries.extend(block)
    return CandidateSet(entries=entries, k=config.k)
