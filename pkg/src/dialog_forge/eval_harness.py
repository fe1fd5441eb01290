"""No-training retrieval evaluation over matched dialogue datasets.

Three task framings share one instance shape: at an image-sharing turn t,
predict the response at t (current_turn), the utterance at t+1 (next_turn),
or the shared image itself (image_retrieval), given the dialogue history.
Rankers are deliberately training-free: Okapi BM25 over text, and a zero-shot
embedding ranker that scores candidates against mean-pooled history vectors.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dialog_filter import MatchedDialogue
from .embed_store import EmbeddingStore, cosine
from .source_filter import utterance_id
from .textproc import tokenize
from .util import derive_seed

CURRENT_TURN = "current_turn"
NEXT_TURN = "next_turn"
IMAGE_RETRIEVAL = "image_retrieval"
TASKS = (CURRENT_TURN, NEXT_TURN, IMAGE_RETRIEVAL)

PROTOCOL_CANDIDATES_100 = "candidates-100"
PROTOCOL_FULL = "full"
PROTOCOLS = (PROTOCOL_CANDIDATES_100, PROTOCOL_FULL)

DEFAULT_KS = (1, 5, 10)
DEFAULT_POOL_SIZE = 100
HISTORY_TURNS = 3  # context window pooled/queried by the rankers

_WORD_SPAN_RE = re.compile(r"\S+")


@dataclass(frozen=True)
class RetrievalInstance:
    task: str
    dialogue_id: str
    turn_index: int  # the image-sharing turn t (0-based)
    history: tuple[str, ...]
    image_id: str | None  # shared image; None for image_retrieval queries
    gold: str  # response utterance id, or image id for image_retrieval


def make_eval_instances(
    dataset: Sequence[MatchedDialogue], task: str
) -> list[RetrievalInstance]:
    """One instance per (dialogue, image-bearing turn) where the task applies.

    current_turn needs a non-empty history, so image shares on the very
    first turn are skipped; next_turn needs a following turn, so shares on
    the final turn are skipped. The top-ranked attachment acts as the shared
    image.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    instances: list[RetrievalInstance] = []
    for md in dataset:
        texts = md.dialogue.texts()
        for t, images in sorted(md.attachments.items()):
            if not images:
                continue
            shared_image = images[0][0]
            if task == CURRENT_TURN:
                if t == 0:
                    continue
                instances.append(
                    RetrievalInstance(
                        task=task,
                        dialogue_id=md.dialogue.dialogue_id,
                        turn_index=t,
                        history=tuple(texts[:t]),
                        image_id=shared_image,
                        gold=utterance_id(md.dialogue.dialogue_id, t),
                    )
                )
            elif task == NEXT_TURN:
                if t == len(texts) - 1:
                    continue
                instances.append(
                    RetrievalInstance(
                        task=task,
                        dialogue_id=md.dialogue.dialogue_id,
                        turn_index=t,
                        history=tuple(texts[: t + 1]),
                        image_id=shared_image,
                        gold=utterance_id(md.dialogue.dialogue_id, t + 1),
                    )
                )
            else:
                instances.append(
                    RetrievalInstance(
                        task=task,
                        dialogue_id=md.dialogue.dialogue_id,
                        turn_index=t,
                        history=tuple(texts[:t]),
                        image_id=None,
                        gold=shared_image,
                    )
                )
    return instances


@dataclass
class Bm25Index:
    """Okapi BM25 statistics over a fixed document collection."""

    k1: float
    b: float
    n_docs: int
    avgdl: float
    doc_len: dict[str, int]
    term_counts: dict[str, Counter]
    df: Counter

    @classmethod
    def build(
        cls,
        docs: Mapping[str, str] | Iterable[tuple[str, str]],
        k1: float = 1.2,
        b: float = 0.75,
    ) -> "Bm25Index":
        items = docs.items() if isinstance(docs, Mapping) else list(docs)
        doc_len: dict[str, int] = {}
        term_counts: dict[str, Counter] = {}
        df: Counter = Counter()
        for doc_id, text in items:
            if doc_id in term_counts:
                raise ValueError(f"duplicate document id {doc_id!r}")
            terms = Counter(tokenize(text))
            term_counts[doc_id] = terms
            doc_len[doc_id] = sum(terms.values())
            for term in terms:
                df[term] += 1
        n_docs = len(term_counts)
        total_len = sum(doc_len.values())
        return cls(
            k1=k1,
            b=b,
            n_docs=n_docs,
            avgdl=total_len / n_docs if n_docs else 0.0,
            doc_len=doc_len,
            term_counts=term_counts,
            df=df,
        )

    def idf(self, term: str) -> float:
        # Smoothed (never-negative) variant: a term in every document scores
        # near zero instead of dragging matches below non-matches.
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], doc_id: str) -> float:
        try:
            counts = self.term_counts[doc_id]
        except KeyError:
            raise KeyError(f"document {doc_id!r} not in index") from None
        dl = self.doc_len[doc_id]
        # Written in the formula's plain left-to-right shape so two honest
        # implementations agree bit for bit, not merely to a few ulp.
        norm = 1 - self.b + self.b * dl / self.avgdl if self.avgdl > 0 else 1.0
        total = 0.0
        for term in query_terms:
            f = counts.get(term, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (self.k1 + 1) / (f + self.k1 * norm)
        return total


def bm25_rank(
    index: Bm25Index, query: str, candidate_ids: Sequence[str], k: int
) -> list[str]:
    """Top-k candidates by BM25 score, descending; ties by id ascending.

    Raises:
        ValueError: query empty after tokenization, or duplicate candidates.
        KeyError: a candidate id the index has never seen.
    """
    terms = tokenize(query)
    if not terms:
        raise ValueError("query is empty after tokenization")
    if len(set(candidate_ids)) != len(candidate_ids):
        raise ValueError("duplicate candidate id")
    scored = [(index.score(terms, cid), cid) for cid in candidate_ids]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [cid for _, cid in scored[:k]]


def _pooled_history_vector(
    instance: RetrievalInstance,
    utterance_store: EmbeddingStore,
    history_turns: int,
) -> np.ndarray:
    n = len(instance.history)
    if n == 0:
        raise ValueError(
            f"instance ({instance.dialogue_id!r}, t={instance.turn_index}) has no history"
        )
    keys = [utterance_id(instance.dialogue_id, j) for j in range(n)][-history_turns:]
    rows = []
    for key in keys:
        if key not in utterance_store:
            raise KeyError(f"missing embedding for utterance {key!r}")
        rows.append(utterance_store.vector(key))
    return np.mean(np.asarray(rows, dtype=np.float64), axis=0)


def embed_rank(
    instance: RetrievalInstance,
    candidate_ids: Sequence[str],
    utterance_store: EmbeddingStore,
    image_store: EmbeddingStore,
    w_text: float = 1.0,
    w_image: float = 1.0,
    k: int | None = None,
    history_turns: int = HISTORY_TURNS,
) -> list[str]:
    """Zero-shot ranking: history-candidate plus image-candidate cosine.

    score(c) = w_text * cos(mean(history), v_c) + w_image * cos(v_image, v_c).
    The image term is skipped when the instance carries no image. Candidates
    come from the utterance store for text tasks and the image store for
    image retrieval.
    """
    pooled = _pooled_history_vector(instance, utterance_store, history_turns)
    candidate_store = image_store if instance.task == IMAGE_RETRIEVAL else utterance_store

    image_vec = None
    if instance.image_id is not None and w_image != 0.0:
        if instance.image_id not in image_store:
            raise KeyError(f"missing embedding for image {instance.image_id!r}")
        image_vec = np.asarray(image_store.vector(instance.image_id), dtype=np.float64)

    scored = []
    for cid in candidate_ids:
        if cid not in candidate_store:
            raise KeyError(f"missing embedding for candidate {cid!r}")
        vec = candidate_store.vector(cid)
        score = w_text * cosine(pooled, vec) if w_text != 0.0 else 0.0
        if image_vec is not None:
            score += w_image * cosine(image_vec, vec)
        scored.append((score, cid))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    top = scored if k is None else scored[:k]
    return [cid for _, cid in top]


def build_candidate_pool(
    instance: RetrievalInstance,
    pool_ids: Sequence[str],
    size: int = DEFAULT_POOL_SIZE,
    seed: int = 0,
) -> list[str]:
    """Gold plus seeded random distractors, min(size, available) in total.

    The per-instance seed derives from (seed, dialogue_id, t) so pools are
    reproducible yet uncorrelated across instances. The returned pool is
    sorted; pool order carries no information.

    Raises:
        ValueError: gold missing from ``pool_ids``.
    """
    unique = set(pool_ids)
    if instance.gold not in unique:
        raise ValueError(
            f"gold {instance.gold!r} missing from the candidate pool "
            f"({instance.task}, {instance.dialogue_id!r}, t={instance.turn_index})"
        )
    others = sorted(unique - {instance.gold})
    need = min(size, len(unique)) - 1
    rng = np.random.default_rng(derive_seed(seed, instance.dialogue_id, instance.turn_index))
    chosen = rng.choice(len(others), size=need, replace=False) if need else []
    pool = [instance.gold] + [others[i] for i in chosen]
    return sorted(pool)


@dataclass
class EvalReport:
    task: str
    protocol: str
    recalls: dict[int, float]  # K -> percentage
    n: int
    skipped: int = 0

    def as_dict(self) -> dict:
        row: dict = {"task": self.task, "protocol": self.protocol, "n": self.n}
        for k in sorted(self.recalls):
            row[f"R@{k}"] = self.recalls[k]
        if self.skipped:
            row["skipped"] = self.skipped
        return row


def recall_at_k(
    rankings: Sequence[Sequence[str]],
    golds: Sequence[str],
    ks: Sequence[int] = DEFAULT_KS,
    task: str = "",
    protocol: str = PROTOCOL_FULL,
    skipped: int = 0,
) -> EvalReport:
    """Percentage of instances whose gold lands in the top K of the ranking."""
    if len(rankings) != len(golds):
        raise ValueError(f"{len(rankings)} rankings for {len(golds)} golds")
    n = len(golds)
    recalls: dict[int, float] = {}
    for k in sorted(ks):
        hits = sum(1 for ranked, gold in zip(rankings, golds) if gold in list(ranked)[:k])
        recalls[k] = 100.0 * hits / n if n else 0.0
    return EvalReport(task=task, protocol=protocol, recalls=recalls, n=n, skipped=skipped)


def _query_text(instance: RetrievalInstance, history_turns: int = HISTORY_TURNS) -> str:
    return " ".join(instance.history[-history_turns:])


def evaluate(
    dataset: Sequence[MatchedDialogue],
    task: str,
    protocol: str,
    ranker: str,
    *,
    utterance_store: EmbeddingStore | None = None,
    image_store: EmbeddingStore | None = None,
    captions: Mapping[str, str] | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    pool_size: int = DEFAULT_POOL_SIZE,
    seed: int = 0,
    k1: float = 1.2,
    b: float = 0.75,
    w_text: float = 1.0,
    w_image: float = 1.0,
    perturb_ratio: float = 0.0,
    synonym_lexicon: Mapping[str, str] | None = None,
    stopwords: Iterable[str] = (),
) -> EvalReport:
    """End-to-end task evaluation with either ranker under either protocol.

    The full protocol ranks against every gold item of the task's test
    instances; candidates-100 ranks against per-instance sampled pools.
    Instances whose query text is empty (an image shared before anyone
    spoke) cannot be ranked and are counted in ``skipped``.

    A positive ``perturb_ratio`` replaces that fraction of eligible query
    words with synonyms before ranking (robustness probe). Only the bm25
    ranker supports it: the embedding ranker scores pre-computed vectors
    and has no model to re-embed perturbed text with.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if ranker not in ("bm25", "embed"):
        raise ValueError(f"unknown ranker {ranker!r}")
    if perturb_ratio > 0.0:
        if synonym_lexicon is None:
            raise ValueError("perturb_ratio needs a synonym lexicon")
        if ranker != "bm25":
            raise ValueError("query perturbation requires a raw-text ranker (bm25)")

    instances = make_eval_instances(dataset, task)

    texts: dict[str, str] = {}
    for md in dataset:
        for j, text in enumerate(md.dialogue.texts()):
            texts[utterance_id(md.dialogue.dialogue_id, j)] = text

    def doc_text(item_id: str) -> str:
        if task == IMAGE_RETRIEVAL:
            if captions is None or item_id not in captions:
                raise KeyError(f"no caption for image {item_id!r}")
            return captions[item_id]
        return texts[item_id]

    full_pool = sorted({inst.gold for inst in instances})
    full_index: Bm25Index | None = None
    if ranker == "bm25" and protocol == PROTOCOL_FULL:
        full_index = Bm25Index.build({i: doc_text(i) for i in full_pool}, k1=k1, b=b)

    rankings: list[list[str]] = []
    golds: list[str] = []
    skipped = 0
    top_k = max(ks)
    for instance in instances:
        query = _query_text(instance)
        if perturb_ratio > 0.0 and synonym_lexicon is not None:
            query = perturb_synonyms(
                query,
                synonym_lexicon,
                perturb_ratio,
                stopwords,
                seed=derive_seed(seed, "perturb", instance.dialogue_id, instance.turn_index),
            )
        if not tokenize(query):
            skipped += 1
            continue
        if protocol == PROTOCOL_FULL:
            pool = full_pool
        else:
            pool = build_candidate_pool(instance, full_pool, size=pool_size, seed=seed)
        if ranker == "bm25":
            index = (
                full_index
                if full_index is not None
                else Bm25Index.build({i: doc_text(i) for i in pool}, k1=k1, b=b)
            )
            ranked = bm25_rank(index, query, pool, k=top_k)
        else:
            if utterance_store is None or image_store is None:
                raise ValueError("embed ranker needs utterance and image stores")
            ranked = embed_rank(
                instance,
                pool,
                utterance_store,
                image_store,
                w_text=w_text,
                w_image=w_image,
                k=top_k,
            )
        rankings.append(ranked)
        golds.append(instance.gold)

    return recall_at_k(rankings, golds, ks=ks, task=task, protocol=protocol, skipped=skipped)


def perturb_synonyms(
    text: str,
    synonym_lexicon: Mapping[str, str],
    ratio: float,
    stopwords: Iterable[str] = (),
    seed: int = 0,
) -> str:
    """Replace a seeded random fraction of eligible words with synonyms.

    Eligible words are non-stopword tokens with a single-token lexicon entry;
    ceil(ratio * eligible) of them are replaced. Whitespace, punctuation at
    token edges, and the token count are all preserved, so ratio 0 returns
    the text unchanged, byte for byte.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    stopset = {w.lower() for w in stopwords}

    spans = list(_WORD_SPAN_RE.finditer(text))
    eligible: list[tuple[int, str, str, str]] = []  # (span idx, prefix, core, suffix)
    for i, span in enumerate(spans):
        token = span.group()
        # Split the token into non-alphanumeric edges and an inner core.
        start = 0
        end = len(token)
        while start < end and not token[start].isalnum():
            start += 1
        while end > start and not token[end - 1].isalnum():
            end -= 1
        core = token[start:end]
        key = core.lower()
        if not core or key in stopset:
            continue
        synonym = synonym_lexicon.get(key)
        if synonym is None or any(c.isspace() for c in synonym):
            continue
        eligible.append((i, token[:start], synonym, token[end:]))

    n_replace = math.ceil(ratio * len(eligible))
    if n_replace == 0:
        return text
    rng = random.Random(seed)
    chosen = {eligible[j][0]: eligible[j] for j in rng.sample(range(len(eligible)), n_replace)}

    out: list[str] = []
    cursor = 0
    for i, span in enumerate(spans):
        out.append(text[cursor : span.start()])
        if i in chosen:
            _, prefix, synonym, suffix = chosen[i]
            out.append(prefix + synonym + suffix)
        else:
            out.append(span.group())
        cursor = span.end()
    out.append(text[cursor:])
    return "".join(out)
