"""Similarity-aware, training-free token pruning for transformer inference."""

from .dynamics import (
    DynamicsRecord,
    FlopsArch,
    FlopsLedger,
    VIT_PRESETS,
    cls_attention_entropy,
    flops_model,
    head_avg_keys,
    key_similarity_score,
    mean_cls_attention,
    token_attention_entropy,
)
from .prune import (
    BipartiteSimGraph,
    OrderPolicy,
    PruneConfig,
    PruneDecision,
    apply_decision,
    node_degrees,
    redundancy_scores,
    saint_decide,
    similarity_matrix,
    split_bipartite,
    vote_prune_rate,
)

__version__ = "0.1.0"

__all__ = [
    "BipartiteSimGraph", "DynamicsRecord", "FlopsArch", "FlopsLedger", "OrderPolicy", "PruneConfig",
    "PruneDecision", "VIT_PRESETS", "apply_decision", "cls_attention_entropy", "flops_model", "head_avg_keys",
    "key_similarity_score", "mean_cls_attention", "node_degrees", "redundancy_scores", "saint_decide",
    "similarity_matrix", "split_bipartite", "token_attention_entropy", "vote_prune_rate",
]
