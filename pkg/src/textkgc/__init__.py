"""Text-based knowledge graph completion with a hashed bag-of-tokens bi-encoder.

Triples are scored as the cosine between a relation-aware query embedding
of (head description, relation description) and a candidate embedding of the
tail description.  Training is contrastive over in-batch, pre-batch, and
self negatives; evaluation ranks every entity with known-true filtering and
optional neighborhood re-ranking.
"""

from .contrastive import (
    CandidateMatrix,
    LossConfig,
    PreBatchQueue,
    TrainingBatch,
    assemble_candidates,
    infonce_loss,
    limit_negatives,
    margin_loss,
    margin_tau_loss,
    score_matrix,
)
from .encoder import (
    EncoderParams,
    ForwardCounter,
    GradientBuffer,
    PrecomputedEntityEncoder,
    encode_backward,
    encode_hr,
    encode_tail,
    forward_hr,
    forward_tail,
    load_checkpoint,
    save_checkpoint,
    temperature,
    tokenize,
)
from .errors import CheckpointError, KgcError, NumericError, ParseError, UnknownIdError
from .evaluation import (
    EntityEmbeddingIndex,
    RankingResult,
    RerankConfig,
    breakdown_by_category,
    build_index,
    evaluate,
    index_from_precomputed,
    predict_topk,
    rank_one,
    rerank_scores,
    write_embeddings,
)
from .graph import (
    Entity,
    KnowledgeGraph,
    Relation,
    Triple,
    add_inverse_triples,
    augment_description,
    classify_relation,
    is_known_triple,
    k_hop_neighbors,
    load_graph,
)
from .randomness import fnv1a_64, named_stream
from .training import OptimizerState, TrainConfig, apply_update, clip_gradients, lr_at, run_batch, train

__version__ = "0.1.0"

__all__ = [
    "CandidateMatrix",
    "CheckpointError",
    "EncoderParams",
    "Entity",
    "EntityEmbeddingIndex",
    "ForwardCounter",
    "GradientBuffer",
    "KgcError",
    "KnowledgeGraph",
    "LossConfig",
    "NumericError",
    "OptimizerState",
    "ParseError",
    "PreBatchQueue",
    "PrecomputedEntityEncoder",
    "RankingResult",
    "Relation",
    "RerankConfig",
    "TrainConfig",
    "TrainingBatch",
    "Triple",
    "UnknownIdError",
    "add_inverse_triples",
    "apply_update",
    "assemble_candidates",
    "augment_description",
    "breakdown_by_category",
    "build_index",
    "classify_relation",
    "clip_gradients",
    "encode_backward",
    "encode_hr",
    "encode_tail",
    "evaluate",
    "fnv1a_64",
    "forward_hr",
    "forward_tail",
    "index_from_precomputed",
    "infonce_loss",
    "is_known_triple",
    "k_hop_neighbors",
    "limit_negatives",
    "load_checkpoint",
    "load_graph",
    "lr_at",
    "margin_loss",
    "margin_tau_loss",
    "named_stream",
    "predict_topk",
    "rank_one",
    "rerank_scores",
    "run_batch",
    "save_checkpoint",
    "score_matrix",
    "temperature",
    "tokenize",
    "train",
    "write_embeddings",
]
