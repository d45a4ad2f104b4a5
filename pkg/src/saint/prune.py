"""SAINT token pruning and the baseline strategies it is compared against.

Tokens after the protected prefix (CLS, distillation) are split
alternately into src (even offsets) and dst (odd offsets). Each src token
is a node whose degree counts dst tokens with key cosine similarity
``>= tau``. A src token with degree ``>= K`` votes as redundant; the batch
prune count ``r`` is the floor of the mean vote count. The ``r`` src
tokens with the highest redundancy score

    score = d * exp(gamma * (m - tau))   if d > 0
            mean similarity to all dst  otherwise

(``m`` = mean similarity over the valid edges) are dropped. All dst tokens
survive.

Every function here is pure. Reductions run in a fixed order so a naive
loop implementation reproduces the results bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_core import F32, Rng, as_f32, l2_norm, matmul, seq_sum

MODES = ("off", "saint", "attention_drop", "merge", "random_drop", "constant_drop")


class PruneError(ValueError):
    pass


class TooFewTokensError(PruneError):
    pass


class OrderPolicy(str, enum.Enum):
    SCORE = "score_order"
    POSITIONAL = "positional_order"


@dataclass(frozen=True)
class PruneConfig:
    mode: str = "saint"
    tau: float = 0.75
    k_neighbors: int = 5
    gamma: float = 10.0
    protected_count: int = 0
    constant_r: int = 0
    seed: int = 0
    # take r from the degree vote instead of constant_r (baselines under a
    # voting schedule); saint always votes
    vote_rate: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise PruneError(f"unknown prune mode {self.mode!r}")
        if not -1.0 <= self.tau <= 1.0:
            raise PruneError("tau out of [-1,1]")
        if self.k_neighbors < 1:
            raise PruneError("k_neighbors must be >= 1")
        if self.gamma < 0:
            raise PruneError("gamma must be >= 0")
        if self.protected_count < 0 or self.constant_r < 0:
            raise PruneError("protected_count and constant_r must be >= 0")

    def with_(self, **kw) -> "PruneConfig":
        return replace(self, **kw)


@dataclass
class BipartiteSimGraph:
    scores: np.ndarray  # [B, Ns, Nd] float32
    valid_mask: np.ndarray  # [B, Ns, Nd] bool
    degrees: np.ndarray  # [B, Ns] int64
    zero_norm: np.ndarray  # [B, N_unprotected] bool, diagnostics only

    @property
    def src_count(self) -> int:
        return self.scores.shape[1]

    @property
    def dst_count(self) -> int:
        return self.scores.shape[2]


@dataclass
class PruneDecision:
    r: int
    n_tokens: int
    protected_count: int
    # [B, Ns - r]: src ranks kept, in descending-score order (ranks r..Ns-1)
    kept_src_ranks: np.ndarray
    scores_snapshot: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return self.r == 0

    @property
    def src_count(self) -> int:
        return (self.n_tokens - self.protected_count + 1) // 2


def identity_decision(batch: int, n_tokens: int, protected_count: int) -> PruneDecision:
    ns = max(0, (n_tokens - protected_count + 1) // 2)
    kept = np.tile(np.arange(ns, dtype=np.int64), (batch, 1))
    return PruneDecision(0, n_tokens, protected_count, kept)


def split_bipartite(seq_len: int, protected_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Absolute positions of the src and dst sets."""
    if seq_len - protected_count < 2:
        raise TooFewTokensError(f"need >= 2 unprotected tokens, got {seq_len - protected_count}")
    return (
        np.arange(protected_count, seq_len, 2, dtype=np.int64),
        np.arange(protected_count + 1, seq_len, 2, dtype=np.int64),
    )


def normalize_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize along the last axis; zero vectors stay zero (flagged)."""
    keys = as_f32(keys)
    norm = l2_norm(keys)
    zero = norm[..., 0] == 0
    safe = np.where(norm == 0, F32(1.0), norm)
    return (keys / safe).astype(F32), zero


def similarity_matrix(src_keys: np.ndarray, dst_keys: np.ndarray) -> np.ndarray:
    """Cosine similarities [B, Ns, Nd] between src and dst keys."""
    a, _ = normalize_keys(src_keys)
    b, _ = normalize_keys(dst_keys)
    return matmul(a, np.swapaxes(b, -1, -2))


def node_degrees(scores: np.ndarray, tau: float) -> np.ndarray:
    return np.count_nonzero(scores >= F32(tau), axis=-1).astype(np.int64)


def vote_prune_rate(degrees: np.ndarray, k_neighbors: int) -> int:
    """r = floor(mean over batch of #{src tokens with degree >= K})."""
    degrees = np.atleast_2d(degrees)
    votes = np.count_nonzero(degrees >= k_neighbors, axis=-1)
    return int(votes.sum()) // degrees.shape[0]


def redundancy_scores(
    scores: np.ndarray,
    valid_mask: np.ndarray,
    degrees: np.ndarray,
    tau: float,
    gamma: float,
) -> np.ndarray:
    """Per-src redundancy score [B, Ns] (float32)."""
    scores = as_f32(scores)
    counts = degrees.astype(F32)
    edge_sum = seq_sum(np.where(valid_mask, scores, F32(0.0)), -1)
    m = (edge_sum / np.maximum(counts, F32(1.0))).astype(F32)
    expo = (F32(gamma) * (m - F32(tau))).astype(F32)
    # exp evaluated in double then rounded, so scalar reference code agrees
    candidate = (counts * np.exp(expo.astype(np.float64)).astype(F32)).astype(F32)
    alternative = (seq_sum(scores, -1) / F32(scores.shape[-1])).astype(F32)
    return np.where(degrees > 0, candidate, alternative).astype(F32)


def descending_order(score: np.ndarray) -> np.ndarray:
    """Stable descending argsort along the last axis (ties: lower index first)."""
    return np.argsort(-score, axis=-1, kind="stable")


def build_graph(keys: np.ndarray, protected_count: int, tau: float) -> BipartiteSimGraph:
    keys = as_f32(keys)
    if keys.ndim == 2:
        keys = keys[None]
    n = keys.shape[1]
    src_pos, dst_pos = split_bipartite(n, protected_count)
    unit, zero = normalize_keys(keys[:, protected_count:])
    a = unit[:, src_pos - protected_count]
    b = unit[:, dst_pos - protected_count]
    scores = matmul(a, np.swapaxes(b, -1, -2))
    valid = scores >= F32(tau)
    return BipartiteSimGraph(scores, valid, np.count_nonzero(valid, axis=-1).astype(np.int64), zero)


def rank_decision(graph: BipartiteSimGraph, r: int, n_tokens: int, config: PruneConfig) -> PruneDecision:
    batch = graph.scores.shape[0]
    if r <= 0:
        return identity_decision(batch, n_tokens, config.protected_count)
    score = redundancy_scores(graph.scores, graph.valid_mask, graph.degrees, config.tau, config.gamma)
    order = descending_order(score)
    diag = {"zero_norm_keys": int(graph.zero_norm.sum())} if graph.zero_norm.any() else {}
    return PruneDecision(r, n_tokens, config.protected_count, order[:, r:], score, diag)


def saint_decide(keys: np.ndarray, config: PruneConfig) -> PruneDecision:
    """Full SAINT decision from head-averaged keys [B, N, D]."""
    keys = as_f32(keys)
    if keys.ndim == 2:
        keys = keys[None]
    batch, n = keys.shape[:2]
    if n - config.protected_count < 2:
        return identity_decision(batch, n, config.protected_count)
    graph = build_graph(keys, config.protected_count, config.tau)
    r = vote_prune_rate(graph.degrees, config.k_neighbors)
    return rank_decision(graph, r, n, config)


def fixed_rate_decision(keys: np.ndarray, r: int, config: PruneConfig) -> PruneDecision:
    """SAINT ranking with a caller-chosen r (no voting)."""
    keys = as_f32(keys)
    if keys.ndim == 2:
        keys = keys[None]
    batch, n = keys.shape[:2]
    if r == 0:
        return identity_decision(batch, n, config.protected_count)
    graph = build_graph(keys, config.protected_count, config.tau)
    if r > graph.src_count:
        raise PruneError(f"r={r} exceeds src count {graph.src_count}")
    return rank_decision(graph, r, n, config)


def kept_positions(decision: PruneDecision, order_policy: OrderPolicy | str = OrderPolicy.SCORE) -> np.ndarray:
    """Absolute input positions of the output tokens, [B, N - r]."""
    policy = OrderPolicy(order_policy)
    batch = decision.kept_src_ranks.shape[0]
    n, p = decision.n_tokens, decision.protected_count
    if decision.is_identity:
        return np.tile(np.arange(n, dtype=np.int64), (batch, 1))
    src_pos, dst_pos = split_bipartite(n, p)
    prot = np.tile(np.arange(p, dtype=np.int64), (batch, 1))
    kept_src = src_pos[decision.kept_src_ranks]
    if policy is OrderPolicy.SCORE:
        rest = np.concatenate([kept_src, np.tile(dst_pos, (batch, 1))], axis=1)
    else:
        rest = np.sort(np.concatenate([kept_src, np.tile(dst_pos, (batch, 1))], axis=1), axis=1)
    return np.concatenate([prot, rest], axis=1)


def gather_tokens(tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(tokens, positions[..., None], axis=1)


def apply_decision(
    tokens: np.ndarray,
    decision: PruneDecision,
    order_policy: OrderPolicy | str = OrderPolicy.SCORE,
) -> np.ndarray:
    """Output ``[protected, kept src, dst]`` (score order) or the kept tokens
    in their original order (positional order)."""
    if tokens.shape[1] != decision.n_tokens or tokens.shape[0] != decision.kept_src_ranks.shape[0]:
        raise PruneError(
            f"decision is for [{decision.kept_src_ranks.shape[0]}, {decision.n_tokens}], "
            f"tokens are {tokens.shape[:2]}"
        )
    if decision.is_identity:
        return tokens
    return gather_tokens(tokens, kept_positions(decision, order_policy))


# --------------------------------------------------------------------------
# baselines


def baseline_attention_drop(tokens: np.ndarray, cls_row: np.ndarray, r: int, protected_count: int) -> np.ndarray:
    """Drop the r unprotected tokens receiving the least CLS attention."""
    return gather_tokens(tokens, attention_drop_positions(cls_row, r, protected_count, tokens.shape))


def attention_drop_positions(cls_row: np.ndarray, r: int, protected_count: int, shape) -> np.ndarray:
    batch, n = shape[:2]
    cls_row = np.broadcast_to(np.asarray(cls_row, dtype=F32), (batch, n))
    if r > n - protected_count:
        raise PruneError(f"r={r} exceeds {n - protected_count} unprotected tokens")
    if r == 0:
        return np.tile(np.arange(n, dtype=np.int64), (batch, 1))
    order = np.argsort(cls_row[:, protected_count:], axis=-1, kind="stable") + protected_count
    kept = np.sort(order[:, r:], axis=-1)
    prot = np.tile(np.arange(protected_count, dtype=np.int64), (batch, 1))
    return np.concatenate([prot, kept], axis=1)


def baseline_random_drop(tokens: np.ndarray, r: int, protected_count: int, seed: int) -> np.ndarray:
    return gather_tokens(tokens, random_drop_positions(r, protected_count, tokens.shape, seed))


def random_drop_positions(r: int, protected_count: int, shape, seed: int) -> np.ndarray:
    batch, n = shape[:2]
    pool = n - protected_count
    if r > pool:
        raise PruneError(f"r={r} exceeds {pool} unprotected tokens")
    if r == 0:
        return np.tile(np.arange(n, dtype=np.int64), (batch, 1))
    rng = Rng(seed)
    rows = []
    for _ in range(batch):
        drop = rng.choice(pool, r) + protected_count
        keep = np.ones(n, dtype=bool)
        keep[drop] = False
        rows.append(np.flatnonzero(keep))
    return np.stack(rows).astype(np.int64)


def constant_drop(tokens: np.ndarray, keys: np.ndarray, r: int, protected_count: int, config: PruneConfig | None = None) -> np.ndarray:
    """SAINT's redundancy ranking with a fixed r, output in score order."""
    cfg = (config or PruneConfig()).with_(protected_count=protected_count)
    return apply_decision(tokens, fixed_rate_decision(keys, r, cfg), OrderPolicy.SCORE)


@dataclass
class MergePlan:
    r: int
    n_tokens: int
    protected_count: int
    unmerged_src: np.ndarray  # [B, Ns - r] src ranks, best match first
    merged_src: np.ndarray  # [B, r] src ranks
    merge_dst: np.ndarray  # [B, r] dst ranks receiving merged_src


def merge_plan(keys: np.ndarray, r: int, protected_count: int) -> MergePlan:
    keys = as_f32(keys)
    if keys.ndim == 2:
        keys = keys[None]
    batch, n = keys.shape[:2]
    ns = (n - protected_count + 1) // 2
    if r > ns:
        raise PruneError(f"r={r} exceeds src count {ns}")
    if r == 0:
        empty = np.zeros((batch, 0), dtype=np.int64)
        return MergePlan(0, n, protected_count, np.tile(np.arange(ns), (batch, 1)), empty, empty)
    scores = build_graph(keys, protected_count, 1.0).scores
    node_max = scores.max(axis=-1)
    node_idx = scores.argmax(axis=-1)
    order = descending_order(node_max)
    merged = order[:, :r]
    return MergePlan(r, n, protected_count, order[:, r:], merged, np.take_along_axis(node_idx, merged, axis=1))


def apply_merge(tokens: np.ndarray, sizes: np.ndarray | None, plan: MergePlan) -> tuple[np.ndarray, np.ndarray]:
    """Size-weighted merge; returns (tokens, sizes) in
    ``[protected, unmerged src, dst]`` order."""
    batch, n, _ = tokens.shape
    if sizes is None:
        sizes = np.ones((batch, n), dtype=F32)
    if plan.r == 0:
        return tokens, sizes
    p = plan.protected_count
    src_pos, dst_pos = split_bipartite(n, p)
    weighted = tokens * sizes[..., None]
    out_tok, out_size = [], []
    for bi in range(batch):
        dst_w = weighted[bi, dst_pos].copy()
        dst_s = sizes[bi, dst_pos].copy()
        # merges applied in descending-similarity order: fixed accumulation
        for s_rank, d_rank in zip(plan.merged_src[bi], plan.merge_dst[bi]):
            dst_w[d_rank] += weighted[bi, src_pos[s_rank]]
            dst_s[d_rank] += sizes[bi, src_pos[s_rank]]
        keep_src = src_pos[plan.unmerged_src[bi]]
        out_tok.append(
            np.concatenate([tokens[bi, :p], tokens[bi, keep_src], (dst_w / dst_s[:, None]).astype(F32)])
        )
        out_size.append(np.concatenate([sizes[bi, :p], sizes[bi, keep_src], dst_s]))
    return np.stack(out_tok).astype(F32), np.stack(out_size).astype(F32)


def baseline_merge(
    tokens: np.ndarray,
    keys: np.ndarray,
    r: int,
    protected_count: int,
    sizes: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Merge the r src tokens with the strongest best-match into that match."""
    return apply_merge(as_f32(tokens), sizes, merge_plan(keys, r, protected_count))


# --------------------------------------------------------------------------
# dispatch used by the model stacks


@dataclass
class PruneResult:
    tokens: np.ndarray
    sizes: np.ndarray | None
    r: int
    # input positions of each output slot, [B, N - r]; for merge a dst slot
    # carries the dst position it absorbed into
    positions: np.ndarray
    decision: PruneDecision | None = None


def capacity(mode: str, n_tokens: int, protected_count: int) -> int:
    """Largest r the mode can remove from ``n_tokens``."""
    free = n_tokens - protected_count
    if mode in ("attention_drop", "random_drop"):
        return max(free, 0)
    return max((free + 1) // 2, 0) if free >= 2 else 0


def prune_step(
    tokens: np.ndarray,
    keys: np.ndarray,
    config: PruneConfig,
    *,
    cls_row: np.ndarray | None = None,
    sizes: np.ndarray | None = None,
    order_policy: OrderPolicy | str = OrderPolicy.SCORE,
) -> PruneResult:
    """Apply ``config.mode`` once. Fixed rates larger than the mode can remove
    are clamped to its capacity (the realized r is reported)."""
    batch, n = tokens.shape[:2]
    p = config.protected_count
    unchanged = PruneResult(tokens, sizes, 0, np.tile(np.arange(n, dtype=np.int64), (batch, 1)))
    if config.mode == "off" or n - p < 2:
        return unchanged
    if config.mode == "saint":
        decision = saint_decide(keys, config)
        if decision.is_identity:
            return unchanged
        pos = kept_positions(decision, order_policy)
        return PruneResult(gather_tokens(tokens, pos), _take_sizes(sizes, pos), decision.r, pos, decision)

    if config.vote_rate:
        r = vote_prune_rate(build_graph(keys, p, config.tau).degrees, config.k_neighbors)
    else:
        r = config.constant_r
    r = min(r, capacity(config.mode, n, p))
    if r == 0:
        return unchanged
    if config.mode == "constant_drop":
        decision = fixed_rate_decision(keys, r, config)
        pos = kept_positions(decision, order_policy)
        return PruneResult(gather_tokens(tokens, pos), _take_sizes(sizes, pos), r, pos, decision)
    if config.mode == "attention_drop":
        if cls_row is None:
            raise PruneError("attention_drop needs the CLS attention row")
        pos = attention_drop_positions(cls_row, r, p, tokens.shape)
        return PruneResult(gather_tokens(tokens, pos), _take_sizes(sizes, pos), r, pos)
    if config.mode == "random_drop":
        pos = random_drop_positions(r, p, tokens.shape, config.seed)
        return PruneResult(gather_tokens(tokens, pos), _take_sizes(sizes, pos), r, pos)
    # merge
    plan = merge_plan(keys, r, p)
    merged, new_sizes = apply_merge(tokens, sizes, plan)
    src_pos, dst_pos = split_bipartite(n, p)
    pos = np.concatenate(
        [np.tile(np.arange(p, dtype=np.int64), (batch, 1)), src_pos[plan.unmerged_src], np.tile(dst_pos, (batch, 1))],
        axis=1,
    )
    return PruneResult(merged, new_sizes, r, pos)


def _take_sizes(sizes: np.ndarray | None, pos: np.ndarray) -> np.ndarray | None:
    if sizes is None:
        return None
    return np.take_along_axis(sizes, pos, axis=1)
