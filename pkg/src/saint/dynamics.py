"""Token-dynamics metrics and the analytic FLOP model.

The four metrics track how tokens evolve with depth: key similarity of
head-averaged keys, entropy of the CLS attention row, mean entropy of the
non-CLS attention rows, and the mean attention mass every token sends to
CLS. Entropies use the natural log.

FLOPs follow the fvcore convention: one multiply-accumulate counts as one
FLOP (``flops_per_mac=1``). Elementwise ops (norms, softmax, residuals,
activations) are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tensor_core import F32, seq_sum

STOCHASTIC_TOL = 1e-5


class DegenerateInputError(ValueError):
    """Input for which a metric is undefined (e.g. a zero-norm key)."""


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DynamicsRecord:
    layer_index: int
    token_count: int
    key_similarity: float
    cls_entropy: float
    token_entropy: float
    mean_cls_attention: float


def head_avg_keys(keys_per_head: np.ndarray) -> np.ndarray:
    """[B, H, N, Dh] -> [B, N, Dh] mean over heads, not normalized."""
    k = np.asarray(keys_per_head, dtype=F32)
    if k.ndim != 4 or k.shape[1] < 1:
        raise ValueError(f"expected [B, H, N, Dh] with H >= 1, got {k.shape}")
    return (seq_sum(k, 1) / F32(k.shape[1])).astype(F32)


def key_similarity_score(keys: np.ndarray) -> np.ndarray | float:
    """Mean pairwise cosine similarity over all (i, j), diagonal included.

    ``keys`` is [N, D] (returns a float) or [B, N, D] (returns [B]).
    """
    k = np.asarray(keys, dtype=np.float64)
    single = k.ndim == 2
    if single:
        k = k[None]
    norms = np.sqrt(np.sum(k * k, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm key in similarity score")
    u = k / norms
    # sum_ij cos(i, j) = |sum_i u_i|^2
    total = u.sum(axis=1)
    n = k.shape[1]
    s = np.sum(total * total, axis=-1) / (n * n)
    return float(s[0]) if single else s


def _check_distribution(p: np.ndarray) -> None:
    if np.any(p < 0):
        raise DomainError("attention has negative entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > STOCHASTIC_TOL):
        raise DomainError(f"attention rows must sum to 1 (got {sums.min():.6g}..{sums.max():.6g})")


def _row_entropy(p: np.ndarray) -> np.ndarray:
    logs = np.log(np.where(p > 0, p, 1.0))
    return 0.0 - np.sum(p * logs, axis=-1)


def cls_attention_entropy(attn_row: np.ndarray) -> float:
    p = np.asarray(attn_row, dtype=np.float64)
    _check_distribution(p)
    return float(_row_entropy(p))


def token_attention_entropy(attn: np.ndarray, cls_present: bool = True) -> float:
    """Mean row entropy over non-CLS rows (all rows when there is no CLS)."""
    a = np.asarray(attn, dtype=np.float64)
    _check_distribution(a)
    rows = a[1:] if cls_present else a
    if rows.shape[0] == 0:
        return 0.0
    return float(_row_entropy(rows).mean())


def mean_cls_attention(attn: np.ndarray) -> float:
    a = np.asarray(attn, dtype=np.float64)
    _check_distribution(a)
    return float(a[:, 0].mean())


def layer_dynamics(layer_index: int, keys: np.ndarray, attn: np.ndarray, cls_present: bool = True) -> DynamicsRecord:
    """Metrics for one sequence at one layer.

    ``keys`` is the head-averaged [N, D] key set, ``attn`` the head-averaged
    [N, N] attention matrix. Without a CLS token the first token stands in
    for the CLS row and column.
    """
    return DynamicsRecord(
        layer_index=layer_index,
        token_count=int(np.shape(keys)[0]),
        key_similarity=key_similarity_score(keys),
        cls_entropy=cls_attention_entropy(np.asarray(attn)[0]),
        token_entropy=token_attention_entropy(attn, cls_present),
        mean_cls_attention=mean_cls_attention(attn),
    )


# --------------------------------------------------------------------------
# FLOP model


@dataclass(frozen=True)
class FlopsArch:
    """Hyperparameters the FLOP model needs.

    ``patch=None`` means there is no patch embedding (LM). ``head_outputs``
    is the classifier/LM-head width; the head is counted once per sample.
    """

    layers: int
    dim: int
    heads: int
    mlp_ratio: float = 4.0
    patch: int | None = 16
    image_size: int = 224
    in_chans: int = 3
    extra_tokens: int = 1
    head_outputs: int = 1000
    include_patch_embed: bool = True
    include_head: bool = False
    flops_per_mac: int = 1

    @property
    def patch_tokens(self) -> int:
        if self.patch is None:
            return 0
        return (self.image_size // self.patch) ** 2

    @property
    def tokens(self) -> int:
        return self.patch_tokens + self.extra_tokens

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)


VIT_PRESETS: dict[str, FlopsArch] = {
    "vit-t/16": FlopsArch(layers=12, dim=192, heads=3, patch=16),
    "vit-s/16": FlopsArch(layers=12, dim=384, heads=6, patch=16),
    "vit-b/16": FlopsArch(layers=12, dim=768, heads=12, patch=16),
    "vit-l/16": FlopsArch(layers=24, dim=1024, heads=16, patch=16),
    "vit-l/14": FlopsArch(layers=24, dim=1024, heads=16, patch=14),
    "vit-h/14": FlopsArch(layers=32, dim=1280, heads=16, patch=14),
}


class LayerFlops(NamedTuple):
    attention: int
    ffn: int
    other: int = 0


@dataclass
class FlopsLedger:
    layers: list[LayerFlops] = field(default_factory=list)
    embed: int = 0
    head: int = 0

    @property
    def total(self) -> int:
        return self.embed + self.head + sum(sum(l) for l in self.layers)

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def block_flops(n_query: int, n_ffn: int, dim: int, mlp_hidden: int, n_keys: int | None = None) -> LayerFlops:
    """MACs of one transformer block.

    Attention: q/k/v/out projections ``4 n C^2`` plus scores and weighted sum
    ``2 n n_k C``. FFN: two linears ``2 n C hidden`` (``8 n C^2`` at ratio 4).
    ``n_ffn`` differs from ``n_query`` when tokens are pruned between the two.
    """
    if n_keys is None:
        n_keys = n_query
    attention = 4 * n_query * dim * dim + 2 * n_query * n_keys * dim
    ffn = 2 * n_ffn * dim * mlp_hidden
    return LayerFlops(attention, ffn, 0)


def flops_model(
    arch: FlopsArch,
    token_schedule: Sequence[int | tuple[int, int]],
    other: Sequence[int] | None = None,
) -> FlopsLedger:
    """Per-sample FLOPs for a token schedule.

    Each schedule entry is the token count at a layer, or a pair
    ``(tokens_into_attention, tokens_into_ffn)`` for a layer that prunes
    between the two blocks. ``other`` adds per-layer MACs (e.g. the
    similarity-graph cost of pruning) to the ``other`` bucket.
    """
    if len(token_schedule) == 0:
        raise ValueError("empty token schedule")
    if len(token_schedule) != arch.layers:
        raise ValueError(f"schedule has {len(token_schedule)} entries for {arch.layers} layers")
    if other is not None and len(other) != arch.layers:
        raise ValueError("other-flops list must match layer count")
    fpm = arch.flops_per_mac
    ledger = FlopsLedger()
    for i, entry in enumerate(token_schedule):
        n_attn, n_ffn = (entry, entry) if isinstance(entry, (int, np.integer)) else entry
        if n_attn < 0 or n_ffn < 0 or n_ffn > n_attn:
            raise ValueError(f"bad token counts at layer {i}: {entry}")
        lf = block_flops(int(n_attn), int(n_ffn), arch.dim, arch.mlp_hidden)
        extra = 0 if other is None else int(other[i])
        ledger.layers.append(LayerFlops(lf.attention * fpm, lf.ffn * fpm, extra * fpm))
    if arch.include_patch_embed and arch.patch is not None:
        ledger.embed = arch.patch_tokens * arch.in_chans * arch.patch * arch.patch * arch.dim * fpm
    if arch.include_head:
        ledger.head = arch.dim * arch.head_outputs * fpm
    return ledger


def decode_step_flops(dim: int, mlp_hidden: int, cache_lengths: Sequence[int], vocab: int = 0) -> FlopsLedger:
    """MACs of one decode step: one query per layer against its cache.

    ``cache_lengths`` are per-layer key counts including the new token.
    """
    ledger = FlopsLedger()
    for t in cache_lengths:
        ledger.layers.append(block_flops(1, 1, dim, mlp_hidden, n_keys=int(t)))
    ledger.head = dim * vocab
    return ledger

