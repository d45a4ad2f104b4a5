"""A small pre-norm ViT encoder with a pruning hook after attention.

Weight matrices are stored ``[in, out]`` so every projection is ``x @ W``.
Canonical tensor names (SNT1 files use the same names)::

    patch_embed.weight  [in_chans*P*P, C]     patch_embed.bias  [C]
    cls_token           [1, 1, C]             dist_token        [1, 1, C]
    pos_embed           [1, N, C]
    blocks.{i}.norm1.weight / .bias           [C]
    blocks.{i}.attn.qkv.weight [C, 3C]        blocks.{i}.attn.qkv.bias  [3C]
    blocks.{i}.attn.proj.weight [C, C]        blocks.{i}.attn.proj.bias [C]
    blocks.{i}.norm2.weight / .bias           [C]
    blocks.{i}.mlp.fc1.weight [C, hidden]     blocks.{i}.mlp.fc1.bias   [hidden]
    blocks.{i}.mlp.fc2.weight [hidden, C]     blocks.{i}.mlp.fc2.bias   [C]
    norm.weight / norm.bias                   [C]
    head.weight [C, num_classes]              head.bias [num_classes]

Patches are flattened channel-major: (c, row, col).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import FlopsArch, FlopsLedger, flops_model, head_avg_keys, layer_dynamics
from .prune import OrderPolicy, PruneConfig, prune_step
from .tensor_core import F32, Rng, as_f32, gelu, layernorm, linear, matmul, softmax_lastdim

INIT_SCALE = 0.02


@dataclass(frozen=True)
class VitConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 4
    image_size: int = 32
    in_chans: int = 3
    num_classes: int = 10
    cls_token: bool = True
    distill_token: bool = False
    # None: first half of the layers
    prune_layers: frozenset[int] | None = None
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(mode="off"))
    layer_overrides: tuple[tuple[int, PruneConfig], ...] = ()
    order_policy: str = OrderPolicy.SCORE.value

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if not set(self.active_prune_layers) <= set(range(self.layers)):
            raise ValueError("prune_layers must lie in [0, layers)")

    @property
    def protected_count(self) -> int:
        return int(self.cls_token) + int(self.distill_token)

    @property
    def patch_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def tokens(self) -> int:
        return self.patch_tokens + self.protected_count

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def active_prune_layers(self) -> frozenset[int]:
        if self.prune_layers is None:
            return frozenset(range(self.layers // 2))
        return frozenset(self.prune_layers)

    def layer_prune(self, i: int) -> PruneConfig | None:
        """Prune config for layer ``i`` with protection filled in, or None."""
        overrides = dict(self.layer_overrides)
        if i in overrides:
            cfg = overrides[i]
        elif i in self.active_prune_layers:
            cfg = self.prune
        else:
            return None
        if cfg.mode == "off":
            return None
        return cfg.with_(protected_count=self.protected_count)

    def flops_arch(self) -> FlopsArch:
        return FlopsArch(
            layers=self.layers,
            dim=self.dim,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            patch=self.patch,
            image_size=self.image_size,
            in_chans=self.in_chans,
            extra_tokens=self.protected_count,
            head_outputs=self.num_classes,
        )


@dataclass
class LayerTrace:
    layer_index: int
    keys_head_avg: np.ndarray  # [B, N_in, Dh]
    token_count_in: int
    token_count_out: int
    prune_r: int
    positions: np.ndarray  # [B, N_out] input slots kept by the prune step
    attention: np.ndarray | None = None  # [B, H, N_in, N_in]

    def dynamics(self, item: int = 0, cls_present: bool = True):
        if self.attention is None:
            raise ValueError("attention was not captured for this layer")
        attn = self.attention[item].astype(np.float64).mean(axis=0)
        attn = attn / attn.sum(axis=-1, keepdims=True)
        return layer_dynamics(self.layer_index, self.keys_head_avg[item], attn, cls_present)


@dataclass
class VitOutput:
    logits: np.ndarray
    pooled: np.ndarray
    tokens: np.ndarray
    traces: list[LayerTrace]
    flops: FlopsLedger

    @property
    def token_schedule(self) -> list[int]:
        return [t.token_count_out for t in self.traces]


def init_vit_weights(cfg: VitConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded Gaussian weights (std 0.02), unit norm gains, zero biases."""
    rng = Rng(seed)
    c, hid = cfg.dim, cfg.mlp_hidden
    w: dict[str, np.ndarray] = {
        "patch_embed.weight": rng.normal((cfg.in_chans * cfg.patch * cfg.patch, c), INIT_SCALE),
        "patch_embed.bias": np.zeros(c, F32),
    }
    if cfg.cls_token:
        w["cls_token"] = rng.normal((1, 1, c), INIT_SCALE)
    if cfg.distill_token:
        w["dist_token"] = rng.normal((1, 1, c), INIT_SCALE)
    w["pos_embed"] = rng.normal((1, cfg.tokens, c), INIT_SCALE)
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
    w["head.weight"] = rng.normal((c, cfg.num_classes), INIT_SCALE)
    w["head.bias"] = np.zeros(cfg.num_classes, F32)
    return w


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, S, S] -> [B, (S/P)^2, C*P*P], patches row-major."""
    b, ch, s, s2 = image.shape
    if s != s2 or s % patch:
        raise ValueError(f"image {image.shape} not tileable by patch {patch}")
    g = s // patch
    x = image.reshape(b, ch, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, ch * patch * patch), dtype=F32)


def patch_embed(image: np.ndarray, weights: dict[str, np.ndarray], cfg: VitConfig) -> np.ndarray:
    image = as_f32(image)
    if image.ndim != 4 or image.shape[1] != cfg.in_chans or image.shape[2] != cfg.image_size:
        raise ValueError(f"expected [B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}], got {image.shape}")
    x = linear(patchify(image, cfg.patch), weights["patch_embed.weight"], weights["patch_embed.bias"])
    b = x.shape[0]
    prefix = []
    if cfg.cls_token:
        prefix.append(np.broadcast_to(weights["cls_token"], (b, 1, cfg.dim)))
    if cfg.distill_token:
        prefix.append(np.broadcast_to(weights["dist_token"], (b, 1, cfg.dim)))
    x = np.concatenate(prefix + [x], axis=1)
    return (x + weights["pos_embed"]).astype(F32)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, c = x.shape
    return np.ascontiguousarray(x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3))


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b, n, h * d))


def self_attention(
    x: np.ndarray,
    weights: dict[str, np.ndarray],
    prefix: str,
    heads: int,
    sizes: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multi-head attention on pre-normed ``x``.

    Returns (output [B, N, C], keys [B, H, N, Dh], attention [B, H, N, N]).
    ``sizes`` adds the log-size bias of proportional attention; ``mask`` is
    an additive [N, N] (or broadcastable) logit mask.
    """
    c = x.shape[-1]
    qkv = linear(x, weights[prefix + "qkv.weight"], weights[prefix + "qkv.bias"])
    q = split_heads(qkv[..., :c], heads)
    k = split_heads(qkv[..., c : 2 * c], heads)
    v = split_heads(qkv[..., 2 * c :], heads)
    scale = F32((c // heads) ** -0.5)
    logits = matmul(q, np.swapaxes(k, -1, -2)) * scale
    if sizes is not None:
        logits = logits + np.log(sizes)[:, None, None, :]
    if mask is not None:
        logits = logits + mask
    attn = softmax_lastdim(logits)
    out = linear(merge_heads(matmul(attn, v)), weights[prefix + "proj.weight"], weights[prefix + "proj.bias"])
    return out, k, attn


def mlp(x: np.ndarray, weights: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    h = gelu(linear(x, weights[prefix + "fc1.weight"], weights[prefix + "fc1.bias"]))
    return linear(h, weights[prefix + "fc2.weight"], weights[prefix + "fc2.bias"])


def encoder_layer(
    x: np.ndarray,
    weights: dict[str, np.ndarray],
    index: int,
    cfg: VitConfig,
    sizes: np.ndarray | None = None,
    capture_attention: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, LayerTrace]:
    """attention -> prune -> FFN for block ``index``."""
    p = f"blocks.{index}."
    h = layernorm(x, weights[p + "norm1.weight"], weights[p + "norm1.bias"])
    out, k, attn = self_attention(h, weights, p + "attn.", cfg.heads, sizes)
    x = x + out
    keys = head_avg_keys(k)
    n_in = x.shape[1]

    pcfg = cfg.layer_prune(index)
    if pcfg is None:
        positions = np.tile(np.arange(n_in, dtype=np.int64), (x.shape[0], 1))
        r = 0
    else:
        cls_row = attn[:, :, 0, :].mean(axis=1) if pcfg.mode == "attention_drop" else None
        res = prune_step(x, keys, pcfg, cls_row=cls_row, sizes=sizes, order_policy=cfg.order_policy)
        x, sizes, r, positions = res.tokens, res.sizes, res.r, res.positions

    h = layernorm(x, weights[p + "norm2.weight"], weights[p + "norm2.bias"])
    x = x + mlp(h, weights, p + "mlp.")
    trace = LayerTrace(index, keys, n_in, x.shape[1], r, positions, attn if capture_attention else None)
    return x, sizes, trace


def vit_forward(
    inputs: np.ndarray,
    cfg: VitConfig,
    weights: dict[str, np.ndarray],
    capture_attention: bool = False,
    stop_after: int | None = None,
) -> VitOutput:
    """Run the encoder on images [B, C, S, S] or token embeddings [B, N, C].

    Embeddings are taken as already carrying CLS/distill and positional
    embeddings. ``stop_after`` returns right after that layer (no head).
    """
    inputs = as_f32(inputs)
    from_image = inputs.ndim == 4
    x = patch_embed(inputs, weights, cfg) if from_image else inputs
    sizes = None
    traces: list[LayerTrace] = []
    last = cfg.layers - 1 if stop_after is None else stop_after
    for i in range(last + 1):
        x, sizes, trace = encoder_layer(x, weights, i, cfg, sizes, capture_attention)
        traces.append(trace)

    arch = cfg.flops_arch()
    schedule = [(t.token_count_in, t.token_count_out) for t in traces]
    schedule += [traces[-1].token_count_out] * (cfg.layers - len(traces))
    ledger = flops_model(
        FlopsArch(**{**arch.__dict__, "include_patch_embed": from_image}),
        schedule,
    )
    if stop_after is not None:
        return VitOutput(np.zeros((x.shape[0], 0), F32), x, x, traces, ledger)

    xn = layernorm(x, weights["norm.weight"], weights["norm.bias"])
    pooled = xn[:, 0] if cfg.cls_token else xn.mean(axis=1, dtype=np.float32)
    logits = linear(pooled, weights["head.weight"], weights["head.bias"])
    return VitOutput(logits, pooled, x, traces, ledger)
