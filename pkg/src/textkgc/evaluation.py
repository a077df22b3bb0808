"""Filtered entity-ranking evaluation over a precomputed entity index.

Head prediction is evaluated as tail prediction on the inverse triple, so a
single ranking code path covers both directions.  Candidates that form a
known-true triple with the query are discarded before ranking (the target
itself always stays), ties share a mean rank, and an optional re-ranking pass
adds a constant boost to the head's k-hop train-graph neighborhood.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from . import encoder as enc
from .errors import KgcError, UnknownIdError
from .graph import (
    KnowledgeGraph,
    Triple,
    augment_description,
    classify_relation,
    k_hop_neighbors,
)

TAIL_DIRECTION = "tail"
HEAD_DIRECTION = "head"
DIRECTIONS = (TAIL_DIRECTION, HEAD_DIRECTION)
HITS_LEVELS = (1, 3, 10)
UNKNOWN_CATEGORY = "unknown"


@dataclass(frozen=True)
class RerankConfig:
    """Score boost ``alpha`` for entities within ``hops`` undirected train
    edges of the query head.  ``alpha=0`` disables re-ranking entirely."""

    alpha: float = 0.05
    hops: int = 2

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise KgcError(f"re-rank boost must be >= 0, got {self.alpha}")
        if self.hops < 1:
            raise KgcError(f"hop radius must be >= 1, got {self.hops}")


@dataclass
class EntityEmbeddingIndex:
    """All entity vectors as rows, in sorted-id order."""

    entity_ids: list[str]
    matrix: np.ndarray
    forward_passes: int
    row_of: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.entity_ids):
            raise KgcError("index needs one matrix row per entity id")
        self.row_of = {e: i for i, e in enumerate(self.entity_ids)}


def build_index(
    g: KnowledgeGraph,
    params: enc.EncoderParams,
    max_tokens: int = enc.DEFAULT_MAX_TOKENS,
    counter: Optional[enc.ForwardCounter] = None,
    workers: int = 1,
) -> EntityEmbeddingIndex:
    """Encode every entity's augmented description once, in eval mode."""
    ids = sorted(g.entities)
    if not ids:
        raise KgcError("graph has no entities to index")

    def encode(entity_id: str) -> np.ndarray:
        tokens = enc.tokenize(augment_description(g, entity_id), params.buckets, max_tokens)
        return enc.encode_tail(params, tokens, counter=counter)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(encode, ids))
    else:
        rows = [encode(e) for e in ids]
    return EntityEmbeddingIndex(ids, np.stack(rows), forward_passes=len(ids))


def index_from_precomputed(
    g: KnowledgeGraph, plugin: enc.PrecomputedEntityEncoder
) -> EntityEmbeddingIndex:
    """Build the index from externally supplied vectors; costs no encoder passes."""
    ids = sorted(g.entities)
    if not ids:
        raise KgcError("graph has no entities to index")
    rows = [plugin.entity_vector(e) for e in ids]
    return EntityEmbeddingIndex(ids, np.stack(rows), forward_passes=0)


def query_vector(
    g: KnowledgeGraph,
    params: enc.EncoderParams,
    head: str,
    relation: str,
    max_tokens: int = enc.DEFAULT_MAX_TOKENS,
    counter: Optional[enc.ForwardCounter] = None,
) -> np.ndarray:
    h_tokens = enc.tokenize(augment_description(g, head), params.buckets, max_tokens)
    r_tokens = enc.tokenize(g.relation(relation).description, params.buckets, max_tokens)
    return enc.encode_hr(params, h_tokens, r_tokens, counter=counter, max_tokens=max_tokens)


def rerank_scores(
    idx: EntityEmbeddingIndex,
    scores: np.ndarray,
    neighbors: Iterable[str],
    alpha: float,
) -> np.ndarray:
    """Return a copy of ``scores`` with ``alpha`` added at each neighbor's row."""
    out = scores.copy()
    for entity_id in neighbors:
        row = idx.row_of.get(entity_id)
        if row is None:
            raise UnknownIdError(f"unknown entity in neighborhood: {entity_id!r}")
        out[row] += alpha
    return out


def _candidate_scores(
    g: KnowledgeGraph,
    idx: EntityEmbeddingIndex,
    params: enc.EncoderParams,
    head: str,
    relation: str,
    rerank: Optional[RerankConfig],
    max_tokens: int,
    counter: Optional[enc.ForwardCounter],
) -> np.ndarray:
    scores = idx.matrix @ query_vector(g, params, head, relation, max_tokens, counter)
    if rerank is not None and rerank.alpha != 0.0:
        hood = k_hop_neighbors(g, head, rerank.hops)
        if hood:
            scores = rerank_scores(idx, scores, hood, rerank.alpha)
    return scores


def rank_one(
    g: KnowledgeGraph,
    idx: EntityEmbeddingIndex,
    params: enc.EncoderParams,
    triple: Triple,
    rerank: Optional[RerankConfig] = None,
    max_tokens: int = enc.DEFAULT_MAX_TOKENS,
    counter: Optional[enc.ForwardCounter] = None,
) -> float:
    """Filtered rank of the triple's tail among all entities.

    Candidates t' != t with (h, r, t') known in any split are discarded.
    rank = 1 + #{kept strictly above target} + #{kept tied with target}/2.
    """
    h, r, t = triple
    target_row = idx.row_of.get(t)
    if target_row is None:
        raise UnknownIdError(f"unknown entity id: {t!r}")
    scores = _candidate_scores(g, idx, params, h, r, rerank, max_tokens, counter)
    target_score = scores[target_row]
    drop = np.zeros(len(scores), dtype=bool)
    for e in g.known_tails(h, r):
        if e != t:
            drop[idx.row_of[e]] = True
    kept = scores[~drop]
    greater = int(np.count_nonzero(kept > target_score))
    equal = int(np.count_nonzero(kept == target_score))  # includes the target
    return 1.0 + greater + (equal - 1) / 2.0


class TripleRanking(NamedTuple):
    triple: Triple
    direction: str
    rank: float
    category: str


def _metrics(ranks: list[float]) -> dict[str, float]:
    arr = np.asarray(ranks, dtype=float)
    out = {"mrr": float(np.mean(1.0 / arr))}
    for level in HITS_LEVELS:
        out[f"hits{level}"] = float(np.mean(arr <= level))
    return out


@dataclass
class RankingResult:
    rankings: list[TripleRanking]
    per_direction: dict[str, dict[str, float]]
    overall: dict[str, float]
    by_category: dict[str, dict[str, float]]
    forward_passes: int
    reranked: bool

    def report(self) -> dict:
        out: dict = dict(self.overall)
        for direction in DIRECTIONS:
            out[direction] = dict(self.per_direction[direction])
        out["by_category"] = {cat: dict(row) for cat, row in sorted(self.by_category.items())}
        out["forward_passes"] = int(self.forward_passes)
        out["reranked"] = bool(self.reranked)
        return out


def breakdown_by_category(rankings: list[TripleRanking]) -> dict[str, dict[str, float]]:
    """MRR and triple count per relation category; empty groups never appear."""
    groups: dict[str, list[float]] = {}
    for row in rankings:
        groups.setdefault(row.category, []).append(row.rank)
    return {
        cat: {"mrr": float(np.mean([1.0 / r for r in ranks])), "count": len(ranks)}
        for cat, ranks in groups.items()
    }


def evaluate(
    g: KnowledgeGraph,
    idx: EntityEmbeddingIndex,
    params: enc.EncoderParams,
    split: str = "test",
    rerank: Optional[RerankConfig] = None,
    max_tokens: int = enc.DEFAULT_MAX_TOKENS,
    workers: int = 1,
    counter: Optional[enc.ForwardCounter] = None,
) -> RankingResult:
    """Rank every triple of the split; inverse rows count as head prediction.

    Overall metrics are the mean of the two directional metric sets, and
    ``forward_passes`` adds one query encoding per triple to the index cost.
    """
    if not g.inverse_augmented:
        raise KgcError("evaluation requires an inverse-augmented graph")
    triples = g.triples(split)
    if not triples:
        raise KgcError(f"split {split!r} has no triples")

    def work(triple: Triple) -> TripleRanking:
        rank = rank_one(g, idx, params, triple, rerank, max_tokens, counter)
        relation = g.relation(triple.relation)
        direction = HEAD_DIRECTION if relation.is_inverse else TAIL_DIRECTION
        try:
            category = classify_relation(g, triple.relation)
        except KgcError:
            category = UNKNOWN_CATEGORY
        return TripleRanking(triple, direction, rank, category)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rankings = list(pool.map(work, triples))
    else:
        rankings = [work(t) for t in triples]

    per_direction = {}
    for direction in DIRECTIONS:
        ranks = [row.rank for row in rankings if row.direction == direction]
        if not ranks:
            raise KgcError(f"split {split!r} has no {direction}-direction triples")
        per_direction[direction] = _metrics(ranks)
    overall = {
        key: float(np.mean([per_direction[d][key] for d in DIRECTIONS]))
        for key in per_direction[TAIL_DIRECTION]
    }
    return RankingResult(
        rankings=rankings,
        per_direction=per_direction,
        overall=overall,
        by_category=breakdown_by_category(rankings),
        forward_passes=idx.forward_passes + len(triples),
        reranked=rerank is not None and rerank.alpha != 0.0,
    )


def predict_topk(
    g: KnowledgeGraph,
    idx: EntityEmbeddingIndex,
    params: enc.EncoderParams,
    head: str,
    relation: str,
    k: int,
    rerank: Optional[RerankConfig] = None,
    max_tokens: int = enc.DEFAULT_MAX_TOKENS,
    counter: Optional[enc.ForwardCounter] = None,
) -> list[tuple[str, float, bool]]:
    """Top-k candidates by score, unfiltered; known-true tails are flagged.

    Ties break toward the lexically smaller entity id, and k is clamped
    to the entity count.
    """
    if k < 1:
        raise KgcError(f"k must be >= 1, got {k}")
    g.entity(head)
    g.relation(relation)
    scores = _candidate_scores(g, idx, params, head, relation, rerank, max_tokens, counter)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], idx.entity_ids[i]))
    known = g.known_tails(head, relation)
    return [
        (idx.entity_ids[i], float(scores[i]), idx.entity_ids[i] in known)
        for i in order[: min(k, len(order))]
    ]


def write_embeddings(idx: EntityEmbeddingIndex, path: str) -> None:
    """Write one ``entity_id<TAB>v1 v2 ...`` line per entity, repr floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for entity_id, row in zip(idx.entity_ids, idx.matrix):
            fh.write(entity_id + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
