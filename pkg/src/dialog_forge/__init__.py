"""dialog-forge: build image-augmented dialogue datasets from embedding stores."""

__version__ = "0.1.0"

from .embed_store import (
    EmbeddingStore,
    ValidationReport,
    cosine,
    open_store,
    validate_store,
    write_store,
)
from .matcher import (
    CandidateEntry,
    CandidateSet,
    PipelineConfig,
    ZScoreStats,
    combined_score,
    compute_zscore_stats,
    match_topk,
)
from .source_filter import (
    Dialogue,
    ImageCaptionPair,
    SplitAssignment,
    Turn,
    dedup_dialogues,
    filter_image_caption_pairs,
    split_pairs,
)

__all__ = [
    "EmbeddingStore",
    "ValidationReport",
    "cosine",
    "open_store",
    "validate_store",
    "write_store",
    "CandidateEntry",
    "CandidateSet",
    "PipelineConfig",
    "ZScoreStats",
    "combined_score",
    "compute_zscore_stats",
    "match_topk",
    "Dialogue",
    "ImageCaptionPair",
    "SplitAssignment",
    "Turn",
    "dedup_dialogues",
    "filter_image_caption_pairs",
    "split_pairs",
    "__version__",
]
