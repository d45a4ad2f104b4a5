"""Experiment recipes: model construction, synthetic inputs, sweeps, CSV.

CSV schemas are frozen; the column lists below are the contract.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, with_overrides
from .dynamics import FlopsArch, flops_model, key_similarity_score
from .lm import LmConfig, VlmConfig, init_lm_weights, run_mode, vision_features
from .prune import PruneConfig
from .snt1 import read_snt1, write_snt1
from .tensor_core import F32, Rng
from .vit import VitConfig, VitOutput, init_vit_weights, vit_forward

RUN_VIT_COLUMNS = [
    "layer", "tokens_in", "tokens_out", "r", "key_similarity", "cls_entropy",
    "token_entropy", "mean_cls_attention", "attention_flops", "ffn_flops",
]
METRICS_COLUMNS = ["layer", "token_count", "key_similarity", "cls_entropy", "token_entropy", "mean_cls_attention"]
FLOPS_COLUMNS = ["layer", "tokens_in", "tokens_out", "attention_flops", "ffn_flops", "other_flops"]
SWEEP_COLUMNS = [
    "axis", "value", "r_schedule", "total_flops", "retained_tokens", "key_similarity", "cls_entropy",
    "token_entropy", "mean_cls_attention", "logit_mse", "top1_agreement",
]
FIG2_COLUMNS = [
    "strategy", "schedule", "layer", "r_schedule", "total_flops", "retained_tokens", "logit_mse", "top1_agreement",
]
RUN_LM_COLUMNS = [
    "mode", "visual_in", "visual_after_pre", "average_retained", "retained_per_layer", "cache_lengths",
    "vision_flops", "prefill_flops", "decode_flops", "total_flops", "transcript", "transcript_agreement",
    "first_logit_mse",
]

FIG2_STRATEGIES = {
    "attn_drop": "attention_drop",
    "sim_merge": "merge",
    "sim_drop": "constant_drop",
    "random": "random_drop",
}
FIG2_SCHEDULES = ("single_layer", "progressive", "voting_first_half")
SINGLE_LAYER_PCT = Fraction(2, 5)

VIT_AXES = ("tau", "k", "gamma", "ratio", "constant_r", "prune_layer_count", "start_layer")
LM_AXES = ("tau", "k", "gamma", "pre_llm_target", "hybrid_pre_fraction", "prune_layer_count", "start_layer")
INT_AXES = {"k", "constant_r", "prune_layer_count", "start_layer", "pre_llm_target"}


# --------------------------------------------------------------------------
# CSV


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(fmt(v) for v in value)
    return str(value)


def to_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path: str | None, columns: Sequence[str], rows: Iterable[dict]) -> str:
    text = to_csv(columns, rows)
    if path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


def pct_to_count(n: int, pct) -> int:
    """floor(n * pct) computed exactly on the decimal value of ``pct``."""
    frac = pct if isinstance(pct, Fraction) else Fraction(str(pct))
    return math.floor(n * frac)


# --------------------------------------------------------------------------
# models and inputs


def vit_config(exp: ExperimentConfig, **kw) -> VitConfig:
    v = exp.model.vit
    base = dict(
        layers=v.layers, dim=v.dim, heads=v.heads, mlp_ratio=v.mlp_ratio, patch=v.patch,
        image_size=v.image_size, num_classes=v.num_classes, cls_token=v.cls_token,
        distill_token=v.distill_token, prune_layers=frozenset(), prune=PruneConfig(mode="off"),
    )
    base.update(kw)
    return VitConfig(**base)


def lm_config(exp: ExperimentConfig) -> LmConfig:
    m, p = exp.model.lm, exp.prune
    if p.mode not in ("off", "saint", "constant_drop", "random_drop"):
        raise ConfigError(f"prune.mode: {p.mode!r} is not available inside the LM")
    return LmConfig(
        layers=m.layers, dim=m.dim, heads=m.heads, vocab_size=m.vocab_size, max_seq=m.max_seq,
        mlp_ratio=m.mlp_ratio, prune_layers=frozenset(p.lm_layers),
        prune=PruneConfig(
            mode=p.mode, tau=p.tau, k_neighbors=p.k, gamma=p.gamma,
            constant_r=p.constant_r or 0, seed=exp.data.seed,
        ),
        tau_table=tuple((int(k), v) for k, v in p.tau_table.items()),
    )


def gen_model(kind: str, exp: ExperimentConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded weights with canonical names. LM files also carry the vision
    tower under the ``vision.`` prefix."""
    vcfg = vit_config(exp)
    if kind == "vit":
        return init_vit_weights(vcfg, seed)
    if kind == "lm":
        w = init_lm_weights(lm_config(exp), seed, vision_dim=vcfg.dim)
        w.update({f"vision.{k}": v for k, v in init_vit_weights(vcfg, seed + 1).items()})
        return w
    raise ConfigError(f"model.kind: unknown kind {kind!r}")


def write_model(path: str, kind: str, exp: ExperimentConfig, seed: int) -> None:
    write_snt1(path, gen_model(kind, exp, seed))


def load_weights(exp: ExperimentConfig, kind: str | None = None) -> dict[str, np.ndarray]:
    kind = kind or exp.model.kind
    if exp.model.weights:
        return read_snt1(exp.model.weights)
    return gen_model(kind, exp, exp.model.seed)


def split_vlm_weights(weights: dict[str, np.ndarray]) -> tuple[dict, dict]:
    vision = {k[len("vision."):]: v for k, v in weights.items() if k.startswith("vision.")}
    lm = {k: v for k, v in weights.items() if not k.startswith("vision.")}
    return vision, lm


def make_images(generator: str, batch: int, vcfg: VitConfig, seed: int) -> np.ndarray:
    """Synthetic images [B, C, S, S] in [0, 1].

    ``duplicated_patches`` tiles each image from a palette of four random
    patches, so many patch tokens are exact duplicates.
    """
    rng = Rng(seed)
    s, p, c = vcfg.image_size, vcfg.patch, vcfg.in_chans
    if generator == "gaussian":
        return rng.uniform((batch, c, s, s))
    if generator == "duplicated_patches":
        g = s // p
        palette = rng.uniform((batch, 4, c, p, p))
        pick = rng.integers(4, size=(batch, g, g))
        img = np.empty((batch, c, s, s), F32)
        for b in range(batch):
            for i in range(g):
                for j in range(g):
                    img[b, :, i * p : (i + 1) * p, j * p : (j + 1) * p] = palette[b, pick[b, i, j]]
        return img
    if generator == "smooth":
        yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        freq = rng.uniform((batch, c, 2), 0.5, 2.0)
        phase = rng.uniform((batch, c, 2), 0.0, 2 * np.pi)
        arg_y = freq[..., 0, None, None] * yy * (2 * np.pi / s) + phase[..., 0, None, None]
        arg_x = freq[..., 1, None, None] * xx * (2 * np.pi / s) + phase[..., 1, None, None]
        img = 0.5 + 0.25 * (np.sin(arg_y) + np.cos(arg_x)) + rng.uniform((batch, c, s, s), -0.02, 0.02)
        return img.astype(F32)
    raise ConfigError(f"data.generator: unknown generator {generator!r}")


# --------------------------------------------------------------------------
# ViT schedules


def schedule_vit_config(
    exp: ExperimentConfig,
    mode: str | None = None,
    schedule: str | None = None,
    layers: Sequence[int] | None = None,
) -> VitConfig:
    """VitConfig realizing ``exp.prune`` (optionally overriding mode,
    schedule, layers). Fixed-rate counts use floor on the unprotected
    token count at the input."""
    p = exp.prune
    mode = mode or p.mode
    schedule = schedule or p.schedule
    base = vit_config(exp)
    if mode == "off":
        return base
    L = base.layers
    n_free = base.tokens - base.protected_count
    pcfg = PruneConfig(mode=mode, tau=p.tau, k_neighbors=p.k, gamma=p.gamma, seed=exp.data.seed)

    if schedule in ("voting_first_half", "custom"):
        if layers is None:
            layers = list(range(L // 2)) if schedule == "voting_first_half" else p.layers
        fixed = schedule == "custom" and mode != "saint" and (p.constant_r is not None or p.ratio is not None)
        if fixed:
            r = p.constant_r if p.constant_r is not None else pct_to_count(n_free, p.ratio)
            pcfg = pcfg.with_(constant_r=r)
        else:
            pcfg = pcfg.with_(vote_rate=True)
    else:
        if mode == "saint":
            pcfg = pcfg.with_(mode="constant_drop")
        if schedule == "single_layer":
            pct = SINGLE_LAYER_PCT if p.ratio is None else p.ratio
            layers = p.layers if layers is None else layers
        elif schedule in ("progressive_constant", "progressive"):
            pct = Fraction(1, L) if p.ratio is None else p.ratio
            layers = p.layers if layers is None else layers
        else:
            raise ConfigError(f"prune.schedule: unknown schedule {schedule!r}")
        r = p.constant_r if p.constant_r is not None else pct_to_count(n_free, pct)
        pcfg = pcfg.with_(constant_r=r)
    return replace(base, prune_layers=frozenset(layers), prune=pcfg)


def drift(pruned: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    """(logit MSE, top-1 agreement) of pruned vs unpruned logits."""
    a = pruned.astype(np.float64)
    b = reference.astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    agree = float(np.mean(np.argmax(a, axis=-1) == np.argmax(b, axis=-1)))
    return mse, agree


def mean_dynamics(out: VitOutput, cls_present: bool) -> dict[str, float]:
    recs = [t.dynamics(0, cls_present) for t in out.traces]
    return {
        "key_similarity": float(np.mean([r.key_similarity for r in recs])),
        "cls_entropy": float(np.mean([r.cls_entropy for r in recs])),
        "token_entropy": float(np.mean([r.token_entropy for r in recs])),
        "mean_cls_attention": float(np.mean([r.mean_cls_attention for r in recs])),
    }


class VitBench:
    """Fixed weights + inputs + unpruned reference for repeated runs."""

    def __init__(self, exp: ExperimentConfig):
        self.exp = exp
        self.base = vit_config(exp)
        self.weights = load_weights(exp, "vit")
        if any(k.startswith("vision.") for k in self.weights):
            self.weights = split_vlm_weights(self.weights)[0]
        d = exp.data
        self.images = make_images(d.generator, d.batch_size, self.base, d.seed)
        self.reference = vit_forward(self.images, self.base, self.weights)

    def run(self, cfg: VitConfig, capture_attention: bool = False) -> VitOutput:
        return vit_forward(self.images, cfg, self.weights, capture_attention=capture_attention)

    def row(self, cfg: VitConfig, with_metrics: bool = False) -> dict:
        out = self.run(cfg, capture_attention=with_metrics)
        mse, agree = drift(out.logits, self.reference.logits)
        row = {
            "r_schedule": [t.prune_r for t in out.traces],
            "total_flops": out.flops.total,
            "retained_tokens": out.traces[-1].token_count_out,
            "logit_mse": mse,
            "top1_agreement": agree,
        }
        if with_metrics:
            row.update(mean_dynamics(out, cfg.cls_token))
        return row


def run_vit(exp: ExperimentConfig) -> tuple[list[dict], VitOutput, VitOutput]:
    bench = VitBench(exp)
    out = bench.run(schedule_vit_config(exp), capture_attention=True)
    rows = []
    for t, lf in zip(out.traces, out.flops.layers):
        d = t.dynamics(0, bench.base.cls_token)
        rows.append({
            "layer": t.layer_index, "tokens_in": t.token_count_in, "tokens_out": t.token_count_out,
            "r": t.prune_r, "key_similarity": d.key_similarity, "cls_entropy": d.cls_entropy,
            "token_entropy": d.token_entropy, "mean_cls_attention": d.mean_cls_attention,
            "attention_flops": lf.attention, "ffn_flops": lf.ffn,
        })
    return rows, out, bench.reference


def layer_metrics(exp: ExperimentConfig) -> list[dict]:
    """Per-layer dynamics of the unpruned encoder (batch item 0)."""
    bench = VitBench(exp)
    out = bench.run(bench.base, capture_attention=True)
    rows = []
    for t in out.traces:
        d = t.dynamics(0, bench.base.cls_token)
        rows.append({
            "layer": d.layer_index, "token_count": d.token_count, "key_similarity": d.key_similarity,
            "cls_entropy": d.cls_entropy, "token_entropy": d.token_entropy,
            "mean_cls_attention": d.mean_cls_attention,
        })
    return rows


def flops_rows(arch: FlopsArch, schedule: Sequence) -> list[dict]:
    ledger = flops_model(arch, schedule)
    rows = []
    for i, (entry, lf) in enumerate(zip(schedule, ledger.layers)):
        n_in, n_out = (entry, entry) if isinstance(entry, int) else entry
        rows.append({"layer": i, "tokens_in": n_in, "tokens_out": n_out, "attention_flops": lf.attention,
                     "ffn_flops": lf.ffn, "other_flops": lf.other})
    rows.append({"layer": "total", "tokens_in": "", "tokens_out": "", "attention_flops": ledger.embed,
                 "ffn_flops": ledger.head, "other_flops": ledger.total})
    return rows


# --------------------------------------------------------------------------
# sweeps


def parse_axis_values(axis: str, values: Sequence) -> list:
    if not values:
        raise ConfigError("sweep needs at least one value")
    conv = int if axis in INT_AXES else float
    out = []
    for v in values:
        try:
            out.append(conv(v))
        except (TypeError, ValueError):
            raise ConfigError(f"sweep value {v!r} is not valid for axis {axis}") from None
    return out


def _axis_config(exp: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    kind = exp.model.kind
    L = exp.model.vit.layers if kind == "vit" else exp.model.lm.layers
    layer_key = "prune.layers" if kind == "vit" else "prune.lm_layers"
    extra = {}
    if kind == "vit" and exp.prune.schedule == "voting_first_half" and axis in ("prune_layer_count", "start_layer"):
        extra["prune.schedule"] = "custom"
    if axis == "tau":
        return with_overrides(exp, **{"prune.tau": value})
    if axis == "k":
        return with_overrides(exp, **{"prune.k": value})
    if axis in ("gamma", "ratio", "constant_r", "pre_llm_target", "hybrid_pre_fraction"):
        return with_overrides(exp, **{f"prune.{axis}": value})
    if axis == "prune_layer_count":
        return with_overrides(exp, **extra, **{layer_key: list(range(min(value, L)))})
    if axis == "start_layer":
        span = L // 2 if kind == "vit" else len(exp.prune.lm_layers)
        return with_overrides(exp, **extra, **{layer_key: list(range(value, min(value + span, L)))})
    raise ConfigError(f"unknown sweep axis {axis!r}")


def run_sweep(exp: ExperimentConfig, axis: str, values: Sequence) -> list[dict]:
    """One row per value, in the given order."""
    axes = VIT_AXES if exp.model.kind == "vit" else LM_AXES
    if axis not in axes:
        raise ConfigError(f"unknown sweep axis {axis!r} (choose from {', '.join(axes)})")
    values = parse_axis_values(axis, values)
    rows = []
    if exp.model.kind == "vit":
        bench = VitBench(exp)
        for v in values:
            point = _axis_config(exp, axis, v)
            row = bench.row(schedule_vit_config(point), with_metrics=True)
            rows.append({"axis": axis, "value": v, **row})
        return rows
    lm = LmBench(exp)
    for v in values:
        point = _axis_config(exp, axis, v)
        rep = lm.run(point, point.prune.vlm_mode)
        mse, agree = lm.compare(rep)
        rows.append({
            "axis": axis, "value": v, "r_schedule": rep.prune_r,
            "total_flops": rep.total_flops, "retained_tokens": rep.average_retained,
            "key_similarity": lm.visual_similarity, "cls_entropy": float("nan"), "token_entropy": float("nan"),
            "mean_cls_attention": float("nan"), "logit_mse": mse, "top1_agreement": agree,
        })
    return rows


def run_fig2(
    exp: ExperimentConfig,
    strategies: Sequence[str] = tuple(FIG2_STRATEGIES),
    schedules: Sequence[str] = FIG2_SCHEDULES,
) -> list[dict]:
    """Pruning-strategy x schedule grid.

    single_layer prunes floor(40%) of the unprotected tokens at one layer
    (one row per layer); progressive prunes floor(100/depth %) per layer
    from layer 0 through the row's layer; voting_first_half lets the degree
    vote set r on the first half of the layers (one row).
    """
    bench = VitBench(exp)
    L = bench.base.layers
    rows = []
    for strategy in strategies:
        if strategy not in FIG2_STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        mode = FIG2_STRATEGIES[strategy]
        for schedule in schedules:
            if schedule == "single_layer":
                plans = [(l, [l]) for l in range(L)]
                point = with_overrides(exp, **{"prune.ratio": None, "prune.constant_r": None, "prune.layers": None, "prune.schedule": "single_layer"})
            elif schedule == "progressive":
                plans = [(l, list(range(l + 1))) for l in range(L)]
                point = with_overrides(exp, **{"prune.ratio": None, "prune.constant_r": None, "prune.schedule": "progressive_constant", "prune.layers": None})
            elif schedule == "voting_first_half":
                plans = [(L // 2 - 1, list(range(L // 2)))]
                point = with_overrides(exp, **{"prune.schedule": "voting_first_half", "prune.layers": None})
                mode = "saint" if strategy == "sim_drop" else FIG2_STRATEGIES[strategy]
            else:
                raise ConfigError(f"unknown schedule {schedule!r}")
            for layer, layers in plans:
                cfg = schedule_vit_config(point, mode=mode, layers=layers)
                rows.append({"strategy": strategy, "schedule": schedule, "layer": layer, **bench.row(cfg)})
            mode = FIG2_STRATEGIES[strategy]
    return rows


# --------------------------------------------------------------------------
# LM / VLM


class LmBench:
    def __init__(self, exp: ExperimentConfig):
        self.exp = exp
        weights = load_weights(exp, "lm")
        self.vweights, self.lweights = split_vlm_weights(weights)
        d = exp.data
        self.vcfg = vit_config(exp)
        self.image = make_images(d.generator, 1, self.vcfg, d.seed)
        rng = Rng(d.seed + 1)
        vocab = exp.model.lm.vocab_size
        self.system_ids = [int(i) for i in rng.integers(vocab, size=d.system_len)]
        self.text_ids = [int(i) for i in rng.integers(vocab, size=d.text_len)]
        self.reference = self.run(with_overrides(exp, **{"prune.mode": "off"}), "llm_only")
        _, vkeys, _ = vision_features(self.image, self.vcfg, self.vweights)
        self.visual_similarity = float(key_similarity_score(vkeys[0]))

    def vlm_config(self, exp: ExperimentConfig) -> VlmConfig:
        p = exp.prune
        pre = PruneConfig(
            mode="saint" if p.mode != "off" else "off", tau=p.tau, k_neighbors=p.k, gamma=p.gamma, seed=exp.data.seed
        )
        return VlmConfig(
            vit=self.vcfg, lm=lm_config(exp), pre_llm=pre, pre_llm_target=p.pre_llm_target,
            hybrid_pre_fraction=p.hybrid_pre_fraction, decode_steps=exp.data.decode_steps,
        )

    def run(self, exp: ExperimentConfig, mode: str):
        return run_mode(mode, self.image, self.system_ids, self.text_ids, self.vlm_config(exp),
                        self.vweights, self.lweights)

    def compare(self, rep) -> tuple[float, float]:
        ref = self.reference
        mse, _ = drift(rep.first_logits, ref.first_logits)
        n = max(len(ref.transcript), 1)
        agree = sum(a == b for a, b in zip(rep.transcript, ref.transcript)) / n
        return mse, agree


def run_lm(exp: ExperimentConfig, modes: Sequence[str] = ("vit_only", "llm_only", "hybrid")) -> list[dict]:
    """Unpruned reference plus each VLM placement."""
    bench = LmBench(exp)
    reports = [("unpruned", bench.reference)] + [(m, bench.run(exp, m)) for m in modes]
    rows = []
    for name, rep in reports:
        mse, agree = bench.compare(rep)
        rows.append({
            "mode": name, "visual_in": rep.visual_in, "visual_after_pre": rep.visual_after_pre,
            "average_retained": rep.average_retained, "retained_per_layer": rep.retained_per_layer,
            "cache_lengths": rep.cache_lengths, "vision_flops": rep.vision_flops.total,
            "prefill_flops": rep.prefill_flops.total, "decode_flops": rep.decode_flops.total,
            "total_flops": rep.total_flops, "transcript": rep.transcript, "transcript_agreement": agree,
            "first_logit_mse": mse,
        })
    return rows
