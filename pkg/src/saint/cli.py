"""Command-line front end.

    saint gen-model --kind vit --out model.snt1
    saint run-vit --config exp.json --tau 0.8 --out layers.csv
    saint run-lm --layers 1,2 --out modes.csv
    saint sweep --axis tau --values 0.70,0.71,0.72 --out tau.csv
    saint fig2 --out fig2.csv
    saint flops --preset vit-l/16
    saint metrics --out dynamics.csv
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, default_config, parse_config, with_overrides
from .dynamics import VIT_PRESETS, flops_model
from .snt1 import SNT1Error

log = logging.getLogger("saint")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="seed for data and generated weights")
    p.add_argument("--out", help="output path (CSV, or SNT1 for gen-model); stdout if omitted")
    p.add_argument("--mode", help="prune mode: off|saint|attention_drop|merge|random_drop|constant_drop")
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--layers", help="layer spec, e.g. 0..6 (half-open) or 8,16,24")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saint", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write seeded random weights as SNT1")
    _common(p)
    p.add_argument("--kind", choices=("vit", "lm"), default=None)

    p = sub.add_parser("run-vit", help="per-layer trace of one pruned encoder run")
    _common(p)
    p.add_argument("--schedule", choices=("single_layer", "progressive_constant", "voting_first_half", "custom"))

    p = sub.add_parser("run-lm", help="compare VLM pruning placements")
    _common(p)
    p.add_argument("--vlm-modes", default="vit_only,llm_only,hybrid")

    p = sub.add_parser("sweep", help="one row per value of a config parameter")
    _common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("fig2", help="pruning strategy x schedule grid")
    _common(p)
    p.add_argument("--strategies", default=",".join(ex.FIG2_STRATEGIES))
    p.add_argument("--schedules", default=",".join(ex.FIG2_SCHEDULES))

    p = sub.add_parser("flops", help="analytic FLOPs for a preset or the configured ViT")
    _common(p)
    p.add_argument("--preset", choices=sorted(VIT_PRESETS))
    p.add_argument("--schedule", dest="token_schedule", help="comma-separated per-layer token counts")

    p = sub.add_parser("metrics", help="per-layer token dynamics of the unpruned encoder")
    _common(p)
    return parser


def load_config(args, kind: str | None = None) -> ExperimentConfig:
    if args.config:
        with open(args.config, "rb") as f:
            cfg = parse_config(f.read())
    else:
        cfg = default_config()
    ov: dict = {}
    if kind:
        ov["model.kind"] = kind
    if args.seed is not None:
        ov["data.seed"] = args.seed
        ov["model.seed"] = args.seed
    if args.mode:
        ov["prune.mode"] = args.mode
    if args.tau is not None:
        ov["prune.tau"] = args.tau
    if args.k is not None:
        ov["prune.k"] = args.k
    if args.gamma is not None:
        ov["prune.gamma"] = args.gamma
    if getattr(args, "schedule", None):
        ov["prune.schedule"] = args.schedule
    if args.layers:
        if (kind or cfg.model.kind) == "lm":
            ov["prune.lm_layers"] = args.layers
        else:
            ov["prune.layers"] = args.layers
            if ov.get("prune.schedule", cfg.prune.schedule) == "voting_first_half":
                ov["prune.schedule"] = "custom"
    return with_overrides(cfg, **ov) if ov else cfg


def _emit(args, columns, rows) -> None:
    text = ex.write_csv(args.out, columns, rows)
    if not args.out:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-model":
            cfg = load_config(args, args.kind)
            if not args.out:
                raise ConfigError("gen-model needs --out")
            seed = args.seed if args.seed is not None else cfg.model.seed
            ex.write_model(args.out, cfg.model.kind, cfg, seed)
        elif args.command == "run-vit":
            rows, out, ref = ex.run_vit(load_config(args, "vit"))
            mse, agree = ex.drift(out.logits, ref.logits)
            log.info("total flops %d (unpruned %d), logit mse %.3g, top-1 agreement %.3f",
                     out.flops.total, ref.flops.total, mse, agree)
            _emit(args, ex.RUN_VIT_COLUMNS, rows)
        elif args.command == "run-lm":
            cfg = load_config(args, "lm")
            _emit(args, ex.RUN_LM_COLUMNS, ex.run_lm(cfg, [m for m in args.vlm_modes.split(",") if m]))
        elif args.command == "sweep":
            cfg = load_config(args)
            values = [v for v in args.values.split(",") if v.strip()]
            _emit(args, ex.SWEEP_COLUMNS, ex.run_sweep(cfg, args.axis, values))
        elif args.command == "fig2":
            cfg = load_config(args, "vit")
            rows = ex.run_fig2(cfg, args.strategies.split(","), args.schedules.split(","))
            _emit(args, ex.FIG2_COLUMNS, rows)
        elif args.command == "flops":
            if args.preset:
                arch = VIT_PRESETS[args.preset]
            else:
                arch = ex.vit_config(load_config(args, "vit")).flops_arch()
            if args.token_schedule:
                schedule = [int(t) for t in args.token_schedule.split(",")]
            else:
                schedule = [arch.tokens] * arch.layers
            rows = ex.flops_rows(arch, schedule)
            log.info("%.4g GFLOPs", flops_model(arch, schedule).gflops)
            _emit(args, ex.FLOPS_COLUMNS, rows)
        elif args.command == "metrics":
            _emit(args, ex.METRICS_COLUMNS, ex.layer_metrics(load_config(args, "vit")))
    except (ConfigError, SNT1Error, ValueError, OSError) as e:
        print(f"saint: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
