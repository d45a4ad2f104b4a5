"""Decoder-only LM with a KV cache and SAINT pruning of the visual span.

Pruning happens only during prefill. At each prune layer the visual
tokens still present are ranked with SAINT on that layer's head-averaged
keys; dropped tokens leave the hidden state and the KV cache of that layer
and every later one. Survivors keep their original position ids, so the
causal mask and positional embeddings are unaffected.

Also hosts the three VLM placements: prune before the projector
(``vit_only``), inside the LM (``llm_only``), or both (``hybrid``).

Weight names::

    tok_embed.weight [V, C]       pos_embed.weight [max_seq, C]
    blocks.{i}.*                  same block layout as the ViT
    norm.weight / norm.bias [C]   lm_head.weight [C, V]
    mm_projector.weight [C_vision, C], mm_projector.bias [C]   (VLM only)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import FlopsLedger, block_flops, decode_step_flops, head_avg_keys
from .prune import OrderPolicy, PruneConfig, fixed_rate_decision, kept_positions, prune_step
from .tensor_core import F32, Rng, as_f32, layernorm, linear, matmul, softmax_lastdim
from .vit import INIT_SCALE, VitConfig, merge_heads, mlp, split_heads, vit_forward

log = logging.getLogger(__name__)


class MaxSeqExceeded(RuntimeError):
    pass


def default_lm_prune_layers(layers: int) -> frozenset[int]:
    return frozenset(l for l in range(layers // 4, layers // 2 + 1) if l < layers)


@dataclass(frozen=True)
class LmConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    vocab_size: int = 64
    max_seq: int = 256
    mlp_ratio: float = 4.0
    # None: layers L/4 .. L/2 inclusive, i.e. 8..16 for a 32-layer LM
    prune_layers: frozenset[int] | None = None
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(mode="off"))
    # per-layer tau table; layers missing here use prune.tau
    tau_table: tuple[tuple[int, float], ...] = ()
    visual_span: tuple[int, int] | None = None

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not set(self.active_prune_layers) <= set(range(self.layers)):
            raise ValueError("prune_layers must lie in [0, layers)")
        if self.visual_span is not None:
            s, e = self.visual_span
            if not 0 <= s <= e <= self.max_seq:
                raise ValueError(f"bad visual span {self.visual_span}")

    @property
    def active_prune_layers(self) -> frozenset[int]:
        if self.prune_layers is None:
            return default_lm_prune_layers(self.layers)
        return frozenset(self.prune_layers)

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def layer_prune(self, i: int) -> PruneConfig | None:
        if self.prune.mode == "off" or i not in self.active_prune_layers:
            return None
        tau = dict(self.tau_table).get(i, self.prune.tau)
        return self.prune.with_(tau=tau, protected_count=0)


@dataclass
class KvCache:
    keys: list[np.ndarray]  # per layer [B, H, T_l, Dh]
    values: list[np.ndarray]
    positions: list[np.ndarray]  # per layer [T_l] original position ids
    next_position: int
    prompt_length: int

    @property
    def lengths(self) -> list[int]:
        return [int(k.shape[2]) for k in self.keys]


@dataclass
class PrefillLayer:
    layer_index: int
    tokens_in: int
    prune_r: int
    dropped_positions: np.ndarray
    attention: np.ndarray | None = None  # [B, H, T_in, T_in]
    positions_in: np.ndarray | None = None


@dataclass
class PrefillResult:
    cache: KvCache
    logits: np.ndarray  # [B, V] at the last surviving prompt row
    layers: list[PrefillLayer]
    flops: FlopsLedger


def init_lm_weights(cfg: LmConfig, seed: int, vision_dim: int | None = None) -> dict[str, np.ndarray]:
    rng = Rng(seed)
    c, hid = cfg.dim, cfg.mlp_hidden
    w = {
        "tok_embed.weight": rng.normal((cfg.vocab_size, c), INIT_SCALE),
        "pos_embed.weight": rng.normal((cfg.max_seq, c), INIT_SCALE),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        w[p + "norm1.weight"] = np.ones(c, F32)
        w[p + "norm1.bias"] = np.zeros(c, F32)
        w[p + "attn.qkv.weight"] = rng.normal((c, 3 * c), INIT_SCALE)
        w[p + "attn.qkv.bias"] = np.zeros(3 * c, F32)
        w[p + "attn.proj.weight"] = rng.normal((c, c), INIT_SCALE)
        w[p + "attn.proj.bias"] = np.zeros(c, F32)
        w[p + "norm2.weight"] = np.ones(c, F32)
        w[p + "norm2.bias"] = np.zeros(c, F32)
        w[p + "mlp.fc1.weight"] = rng.normal((c, hid), INIT_SCALE)
        w[p + "mlp.fc1.bias"] = np.zeros(hid, F32)
        w[p + "mlp.fc2.weight"] = rng.normal((hid, c), INIT_SCALE)
        w[p + "mlp.fc2.bias"] = np.zeros(c, F32)
    w["norm.weight"] = np.ones(c, F32)
    w["norm.bias"] = np.zeros(c, F32)
    w["lm_head.weight"] = rng.normal((c, cfg.vocab_size), INIT_SCALE)
    if vision_dim is not None:
        w["mm_projector.weight"] = rng.normal((vision_dim, c), INIT_SCALE)
        w["mm_projector.bias"] = np.zeros(c, F32)
    return w


def embed_tokens(ids, weights: dict[str, np.ndarray]) -> np.ndarray:
    return weights["tok_embed.weight"][np.asarray(ids, dtype=np.int64)].astype(F32)


def causal_mask(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    return np.where(k_pos[None, :] <= q_pos[:, None], F32(0.0), F32(-np.inf)).astype(F32)


def _attend(x, weights, prefix, heads, q_pos, k_cache=None, v_cache=None, k_pos=None):
    """Causal attention of rows ``x`` against cached + own keys."""
    c = x.shape[-1]
    qkv = linear(x, weights[prefix + "qkv.weight"], weights[prefix + "qkv.bias"])
    q = split_heads(qkv[..., :c], heads)
    k = split_heads(qkv[..., c : 2 * c], heads)
    v = split_heads(qkv[..., 2 * c :], heads)
    if k_cache is not None:
        k = np.concatenate([k_cache, k], axis=2)
        v = np.concatenate([v_cache, v], axis=2)
        k_pos = np.concatenate([k_pos, q_pos])
    else:
        k_pos = q_pos
    logits = matmul(q, np.swapaxes(k, -1, -2)) * F32((c // heads) ** -0.5)
    attn = softmax_lastdim(logits + causal_mask(q_pos, k_pos))
    out = linear(merge_heads(matmul(attn, v)), weights[prefix + "proj.weight"], weights[prefix + "proj.bias"])
    return out, k, v, attn


def _logits(x_last: np.ndarray, weights) -> np.ndarray:
    h = layernorm(x_last, weights["norm.weight"], weights["norm.bias"])
    return matmul(h, weights["lm_head.weight"])


def prefill(
    prompt_embeds: np.ndarray,
    cfg: LmConfig,
    weights: dict[str, np.ndarray],
    capture_attention: bool = False,
) -> PrefillResult:
    x = as_f32(prompt_embeds)
    b, t, _ = x.shape
    if t > cfg.max_seq:
        raise MaxSeqExceeded(f"prompt of {t} tokens exceeds max_seq {cfg.max_seq}")
    x = (x + weights["pos_embed.weight"][:t]).astype(F32)
    pos = np.arange(t, dtype=np.int64)
    span = cfg.visual_span
    if span is not None and span[1] > t:
        raise ValueError(f"visual span {span} outside prompt of length {t}")
    want_prune = cfg.prune.mode != "off" and bool(cfg.active_prune_layers)
    if want_prune and (span is None or span[0] == span[1]):
        log.warning("pruning requested but the visual span is empty; prefill runs unpruned")
        want_prune = False
    if want_prune and b != 1:
        raise ValueError("LM pruning runs with batch size 1")

    keys, values, positions, layers = [], [], [], []
    flops = FlopsLedger()
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        h = layernorm(x, weights[p + "norm1.weight"], weights[p + "norm1.bias"])
        out, k, v, attn = _attend(h, weights, p + "attn.", cfg.heads, pos)
        x = x + out
        n_in = len(pos)
        pos_in = pos
        pcfg = cfg.layer_prune(i) if want_prune else None
        dropped = np.zeros(0, dtype=np.int64)
        r = 0
        if pcfg is not None:
            vis = np.flatnonzero((pos >= span[0]) & (pos < span[1]))
            if len(vis) >= 2:
                vkeys = head_avg_keys(k[:, :, vis])
                res = prune_step(x[:, vis], vkeys, pcfg, order_policy=OrderPolicy.POSITIONAL)
                if res.r:
                    r = res.r
                    keep = np.ones(n_in, dtype=bool)
                    gone = np.setdiff1d(vis, vis[res.positions[0]])
                    keep[gone] = False
                    dropped = pos[gone]
                    x, k, v, pos = x[:, keep], k[:, :, keep], v[:, :, keep], pos[keep]
        keys.append(k)
        values.append(v)
        positions.append(pos)
        h = layernorm(x, weights[p + "norm2.weight"], weights[p + "norm2.bias"])
        x = x + mlp(h, weights, p + "mlp.")
        flops.layers.append(block_flops(n_in, len(pos), cfg.dim, cfg.mlp_hidden))
        layers.append(
            PrefillLayer(i, n_in, r, dropped, attn if capture_attention else None, pos_in if capture_attention else None)
        )
    flops.head = cfg.dim * cfg.vocab_size
    cache = KvCache(keys, values, positions, next_position=t, prompt_length=t)
    return PrefillResult(cache, _logits(x[:, -1], weights), layers, flops)


def decode_step(
    cache: KvCache,
    token_embed: np.ndarray,
    cfg: LmConfig,
    weights: dict[str, np.ndarray],
) -> tuple[np.ndarray, KvCache, FlopsLedger]:
    """One greedy-decoding step; returns (logits [B, V], new cache, flops)."""
    pos_id = cache.next_position
    if pos_id >= cfg.max_seq:
        raise MaxSeqExceeded(f"position {pos_id} exceeds max_seq {cfg.max_seq}")
    x = as_f32(token_embed)
    if x.ndim == 2:
        x = x[:, None]
    x = (x + weights["pos_embed.weight"][pos_id]).astype(F32)
    q_pos = np.array([pos_id], dtype=np.int64)
    keys, values, positions = [], [], []
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        h = layernorm(x, weights[p + "norm1.weight"], weights[p + "norm1.bias"])
        out, k, v, _ = _attend(h, weights, p + "attn.", cfg.heads, q_pos, cache.keys[i], cache.values[i], cache.positions[i])
        x = x + out
        keys.append(k)
        values.append(v)
        positions.append(np.concatenate([cache.positions[i], q_pos]))
        h = layernorm(x, weights[p + "norm2.weight"], weights[p + "norm2.bias"])
        x = x + mlp(h, weights, p + "mlp.")
    new = KvCache(keys, values, positions, pos_id + 1, cache.prompt_length)
    flops = decode_step_flops(cfg.dim, cfg.mlp_hidden, new.lengths, cfg.vocab_size)
    return _logits(x[:, -1], weights), new, flops


def greedy_decode(
    prompt_embeds: np.ndarray,
    cfg: LmConfig,
    weights: dict[str, np.ndarray],
    steps: int,
) -> tuple[list[int], PrefillResult, KvCache, FlopsLedger]:
    """Prefill then ``steps`` greedy tokens (batch 1)."""
    pre = prefill(prompt_embeds, cfg, weights)
    cache, logits = pre.cache, pre.logits
    out: list[int] = []
    flops = FlopsLedger()
    for _ in range(steps):
        tok = int(np.argmax(logits[0]))
        out.append(tok)
        logits, cache, f = decode_step(cache, embed_tokens([[tok]], weights), cfg, weights)
        flops.layers.extend(f.layers)
        flops.head += f.head
    return out, pre, cache, flops


# --------------------------------------------------------------------------
# VLM placements


def pre_llm_prune(
    visual_tokens: np.ndarray,
    keys: np.ndarray,
    cfg: PruneConfig,
    target: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Prune visual tokens before the projector.

    Adaptive (``target=None``): one SAINT pass. Target mode retains exactly
    ``target`` tokens using SAINT ranking with ``r = N - target``; since one
    pass removes at most the src half, larger cuts run repeated passes on
    the survivors. Output keeps the original spatial order. Returns
    (tokens, kept positions [B, N_out]).
    """
    x = as_f32(visual_tokens)
    k = as_f32(keys)
    b, n = x.shape[:2]
    pos = np.tile(np.arange(n, dtype=np.int64), (b, 1))
    cfg = cfg.with_(protected_count=0)
    if target is None:
        if cfg.mode == "off":
            return x, pos
        res = prune_step(x, k, cfg, order_policy=OrderPolicy.POSITIONAL)
        return res.tokens, res.positions
    if not 0 < target <= n:
        raise ValueError(f"target {target} outside (0, {n}]")
    while x.shape[1] > target:
        cur = x.shape[1]
        r = min(cur - target, (cur + 1) // 2)
        keep = kept_positions(fixed_rate_decision(k, r, cfg), OrderPolicy.POSITIONAL)
        x = np.take_along_axis(x, keep[..., None], axis=1)
        k = np.take_along_axis(k, keep[..., None], axis=1)
        pos = np.take_along_axis(pos, keep, axis=1)
    return x, pos


def retained_schedule(n_visual: int, r_by_layer: dict[int, int], layers: int) -> list[int]:
    """Visual tokens held in each layer's cache after that layer's pruning."""
    out, n = [], n_visual
    for i in range(layers):
        n -= r_by_layer.get(i, 0)
        out.append(n)
    return out


def average_retained(per_layer: list[int]) -> float:
    """Layer-weighted mean of retained visual tokens."""
    return sum(per_layer) / len(per_layer)


@dataclass(frozen=True)
class VlmConfig:
    vit: VitConfig = field(default_factory=lambda: VitConfig(layers=4, dim=32, heads=4, patch=4, image_size=32))
    lm: LmConfig = field(default_factory=lambda: LmConfig(layers=4, dim=64, heads=4, vocab_size=64, max_seq=160))
    pre_llm: PruneConfig = field(default_factory=PruneConfig)
    # tokens kept by pre-LLM pruning; None means adaptive (voting)
    pre_llm_target: int | None = None
    hybrid_pre_fraction: float = 0.3
    decode_steps: int = 8


@dataclass
class ModeReport:
    mode: str
    transcript: list[int]
    visual_in: int
    visual_after_pre: int
    retained_per_layer: list[int]
    average_retained: float
    cache_lengths: list[int]
    vision_flops: FlopsLedger
    prefill_flops: FlopsLedger
    decode_flops: FlopsLedger
    first_logits: np.ndarray

    @property
    def prune_r(self) -> list[int]:
        """Visual tokens removed at each LM layer."""
        prev = [self.visual_after_pre] + self.retained_per_layer[:-1]
        return [a - b for a, b in zip(prev, self.retained_per_layer)]

    @property
    def total_flops(self) -> int:
        return self.vision_flops.total + self.prefill_flops.total + self.decode_flops.total


def vision_features(image: np.ndarray, vcfg: VitConfig, vweights) -> tuple[np.ndarray, np.ndarray, FlopsLedger]:
    """Penultimate-layer patch tokens and their head-averaged keys."""
    vcfg = replace(vcfg, prune=PruneConfig(mode="off"), layer_overrides=())
    out = vit_forward(image, vcfg, vweights, stop_after=vcfg.layers - 2)
    p = vcfg.protected_count
    ledger = FlopsLedger(out.flops.layers[: vcfg.layers - 1], out.flops.embed, 0)
    return out.tokens[:, p:], out.traces[-1].keys_head_avg[:, p:], ledger


def run_mode(
    mode: str,
    image: np.ndarray,
    system_ids,
    text_ids,
    cfg: VlmConfig,
    vweights: dict[str, np.ndarray],
    lweights: dict[str, np.ndarray],
) -> ModeReport:
    """Run one VLM placement: ``vit_only``, ``llm_only`` or ``hybrid``."""
    if mode not in ("vit_only", "llm_only", "hybrid"):
        raise ValueError(f"unknown mode {mode!r}")
    visual, vkeys, vflops = vision_features(image, cfg.vit, vweights)
    n_vis = visual.shape[1]

    if mode == "vit_only":
        visual, _ = pre_llm_prune(visual, vkeys, cfg.pre_llm, cfg.pre_llm_target)
    elif mode == "hybrid":
        target = cfg.pre_llm_target
        if target is None:
            target = n_vis - int(np.floor(cfg.hybrid_pre_fraction * n_vis))
        pre = cfg.pre_llm if cfg.pre_llm.mode != "off" else cfg.pre_llm.with_(mode="saint")
        visual, _ = pre_llm_prune(visual, vkeys, pre, target)
    n_after = visual.shape[1]

    proj = linear(visual, lweights["mm_projector.weight"], lweights["mm_projector.bias"])
    sys_e = embed_tokens(np.asarray(system_ids)[None], lweights)
    txt_e = embed_tokens(np.asarray(text_ids)[None], lweights)
    prompt = np.concatenate([sys_e, proj, txt_e], axis=1)
    span = (sys_e.shape[1], sys_e.shape[1] + n_after)
    lcfg = replace(cfg.lm, visual_span=span)
    if mode == "vit_only":
        lcfg = replace(lcfg, prune=lcfg.prune.with_(mode="off"))

    transcript, pre_res, cache, dflops = greedy_decode(prompt, lcfg, lweights, cfg.decode_steps)
    r_by_layer = {l.layer_index: l.prune_r for l in pre_res.layers}
    per_layer = retained_schedule(n_after, r_by_layer, lcfg.layers)
    return ModeReport(
        mode=mode,
        transcript=transcript,
        visual_in=n_vis,
        visual_after_pre=n_after,
        retained_per_layer=per_layer,
        average_retained=average_retained(per_layer),
        cache_lengths=pre_res.cache.lengths,
        vision_flops=vflops,
        prefill_flops=pre_res.flops,
        decode_flops=dflops,
        first_logits=pre_res.logits,
    )
