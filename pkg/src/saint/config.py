"""JSON experiment configuration: schema, defaults, validation, canonical form."""

from __future__ import annotations

import dataclasses
import json
import re
import types
import typing
from dataclasses import dataclass, field

from .lm import default_lm_prune_layers
from .prune import MODES

SCHEDULES = ("single_layer", "progressive_constant", "voting_first_half", "custom")
GENERATORS = ("gaussian", "duplicated_patches", "smooth")
VLM_MODES = ("vit_only", "llm_only", "hybrid")


class ConfigError(ValueError):
    pass


@dataclass
class VitSection:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 4
    image_size: int = 32
    num_classes: int = 10
    cls_token: bool = True
    distill_token: bool = False


@dataclass
class LmSection:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    vocab_size: int = 64
    max_seq: int = 160
    mlp_ratio: float = 4.0


@dataclass
class ModelSection:
    kind: str = "vit"
    weights: typing.Optional[str] = None
    seed: int = 0
    vit: VitSection = field(default_factory=VitSection)
    lm: LmSection = field(default_factory=LmSection)


@dataclass
class PruneSection:
    mode: str = "saint"
    tau: float = 0.75
    k: int = 5
    gamma: float = 10.0
    schedule: str = "voting_first_half"
    # ViT layers; null resolves per schedule (first half, or [0] for single_layer)
    layers: typing.Optional[list[int]] = None
    # fraction of unprotected tokens removed per pruned layer (fixed-rate schedules)
    ratio: typing.Optional[float] = None
    constant_r: typing.Optional[int] = None
    # LM layers; null resolves to [L/4, L/2] (8..16 for a 32-layer LM)
    lm_layers: typing.Optional[list[int]] = None
    tau_table: dict[str, float] = field(default_factory=dict)
    vlm_mode: str = "llm_only"
    pre_llm_target: typing.Optional[int] = None
    hybrid_pre_fraction: float = 0.3


@dataclass
class DataSection:
    seed: int = 0
    batch_size: int = 2
    generator: str = "duplicated_patches"
    system_len: int = 4
    text_len: int = 8
    decode_steps: int = 8


@dataclass
class OutputSection:
    csv: typing.Optional[str] = None
    trace: bool = False


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    prune: PruneSection = field(default_factory=PruneSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)


# --------------------------------------------------------------------------
# layer specs


_RANGE = re.compile(r"^\s*(\d+)\s*\.\.\s*(\d+)\s*$")


def parse_layer_spec(spec, num_layers: int) -> list[int]:
    """``"0..6"`` (half-open), ``"8,16,24"``, ``"first_half"``, ``"all"``,
    ``"none"``, mixes like ``"0..3,8"``, or a list of ints."""
    if isinstance(spec, list):
        layers = spec
    elif isinstance(spec, str):
        s = spec.strip()
        if s == "first_half":
            return list(range(num_layers // 2))
        if s == "all":
            return list(range(num_layers))
        if s in ("none", ""):
            return []
        layers = []
        for part in s.split(","):
            m = _RANGE.match(part)
            if m:
                layers.extend(range(int(m.group(1)), int(m.group(2))))
            elif part.strip().isdigit():
                layers.append(int(part))
            else:
                raise ConfigError(f"bad layer spec {spec!r}")
    else:
        raise ConfigError(f"bad layer spec {spec!r}")
    if any(not isinstance(l, int) or isinstance(l, bool) for l in layers):
        raise ConfigError(f"layer spec must hold integers: {spec!r}")
    out = sorted(set(layers))
    if out and (out[0] < 0 or out[-1] >= num_layers):
        raise ConfigError(f"layers {out} outside [0, {num_layers})")
    return out


# --------------------------------------------------------------------------
# generic dataclass <- dict


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: must not be null")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        if isinstance(value, str) and item is int:
            return value  # layer spec, resolved later
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        _, vt = typing.get_args(tp)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return {str(k): _coerce(v, vt, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path + '.' if path else ''}{f.name}")
    return cls(**kwargs)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    m, p, d = cfg.model, cfg.prune, cfg.data
    _check(m.kind in ("vit", "lm"), f"model.kind: must be 'vit' or 'lm', got {m.kind!r}")
    _check(0 <= m.seed < 2**64, "model.seed: must be a 64-bit unsigned integer")
    for name, sec in (("model.vit", m.vit), ("model.lm", m.lm)):
        _check(sec.layers >= 1 and sec.dim >= 1 and sec.heads >= 1, f"{name}: layers, dim, heads must be >= 1")
        _check(sec.dim % sec.heads == 0, f"{name}: dim must be divisible by heads")
        _check(sec.mlp_ratio > 0, f"{name}.mlp_ratio: must be > 0")
    _check(m.vit.patch >= 1 and m.vit.image_size % m.vit.patch == 0, "model.vit: image_size must be divisible by patch")
    _check(m.vit.num_classes >= 1, "model.vit.num_classes: must be >= 1")
    _check(m.lm.vocab_size >= 2 and m.lm.max_seq >= 2, "model.lm: vocab_size and max_seq must be >= 2")

    _check(p.mode in MODES, f"prune.mode: must be one of {', '.join(MODES)}")
    _check(-1.0 <= p.tau <= 1.0, "prune.tau: tau out of [-1,1]")
    _check(p.k >= 1, "prune.k: must be >= 1")
    _check(p.gamma >= 0, "prune.gamma: must be >= 0")
    _check(p.schedule in SCHEDULES, f"prune.schedule: must be one of {', '.join(SCHEDULES)}")
    _check(p.ratio is None or 0.0 < p.ratio <= 1.0, "prune.ratio: must be in (0, 1]")
    _check(p.constant_r is None or p.constant_r >= 0, "prune.constant_r: must be >= 0")
    _check(p.vlm_mode in VLM_MODES, f"prune.vlm_mode: must be one of {', '.join(VLM_MODES)}")
    _check(0.0 <= p.hybrid_pre_fraction < 1.0, "prune.hybrid_pre_fraction: must be in [0, 1)")
    _check(p.pre_llm_target is None or p.pre_llm_target >= 1, "prune.pre_llm_target: must be >= 1")

    L = m.vit.layers
    try:
        layers = None if p.layers is None else parse_layer_spec(p.layers, L)
        lm_layers = None if p.lm_layers is None else parse_layer_spec(p.lm_layers, m.lm.layers)
    except ConfigError as e:
        raise ConfigError(f"prune.layers: {e}") from None
    first_half = list(range(L // 2))
    if p.schedule == "voting_first_half":
        _check(layers is None or layers == first_half, "prune.layers: voting_first_half prunes exactly the first half")
        layers = first_half
    elif p.schedule == "single_layer":
        layers = [0] if layers is None else layers
        _check(len(layers) == 1, "prune.layers: single_layer needs exactly one layer")
    elif layers is None:
        layers = first_half
    p.layers = layers
    if lm_layers is None:
        lm_layers = sorted(default_lm_prune_layers(m.lm.layers))
    p.lm_layers = lm_layers
    table = {}
    for k, v in p.tau_table.items():
        _check(k.isdigit() and int(k) < m.lm.layers, f"prune.tau_table.{k}: not an LM layer index")
        _check(-1.0 <= v <= 1.0, f"prune.tau_table.{k}: tau out of [-1,1]")
        table[str(int(k))] = v
    p.tau_table = dict(sorted(table.items(), key=lambda kv: int(kv[0])))

    _check(0 <= d.seed < 2**64, "data.seed: must be a 64-bit unsigned integer")
    _check(d.batch_size >= 1, "data.batch_size: must be >= 1")
    _check(d.generator in GENERATORS, f"data.generator: must be one of {', '.join(GENERATORS)}")
    _check(d.system_len >= 0 and d.text_len >= 1 and d.decode_steps >= 0, "data: bad prompt lengths")
    return cfg


def parse_config(text: str | bytes) -> ExperimentConfig:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e}") from None
    return _validate(_build(ExperimentConfig, data, ""))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def default_config() -> ExperimentConfig:
    return parse_config("{}")


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply dotted-path overrides (``prune.tau=0.8``) and re-validate."""
    data = config_to_dict(cfg)
    for path, value in overrides.items():
        node = data
        *parents, leaf = path.split(".")
        for part in parents:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"{path}: unknown key")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"{path}: unknown key")
        node[leaf] = value
    return _validate(_build(ExperimentConfig, data, ""))
