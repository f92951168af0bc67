"""Command line: train, eval, sweep, ablate, gen-scenario.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 file or checkpoint I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .channel import PacketError
from .config import RunConfig, load_run_config
from .experiments import MODEL_CKPT, load_model, run_ablation, run_eval, run_sweep, run_train
from .numerics import ConfigError
from .numerics.checkpoint import CheckpointError
from .scenario import generate_scenario, save_scenario_config, scene_configs, write_replay
from .training import CheckpointMissingError, DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _pdr_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad pdr list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--pdr", type=float)
        p.add_argument("--pdr-list", type=_pdr_list)
        p.add_argument("--variant", choices=("ctce", "no_mar", "no_coop"))
        return p

    t = common(sub.add_parser("train", help="two-stage training"))
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume", action="store_true", help="continue stage 1 from <out>/stage1.ckpt")
    for name in ("eval", "sweep"):
        p = common(sub.add_parser(name))
        p.add_argument("--checkpoint", type=Path, help=f"defaults to <out>/{MODEL_CKPT}")
    a = common(sub.add_parser("ablate", help="train and evaluate the ablation grid"))
    a.add_argument("--only", help="comma-separated row names to run")
    g = common(sub.add_parser("gen-scenario", help="write scene replays and their configs"))
    g.add_argument("--count", type=int, default=1)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.pdr is not None:
        changes["pdr"] = args.pdr
    if args.pdr_list is not None:
        changes["pdr_list"] = args.pdr_list
    if args.variant is not None:
        changes["variant"] = args.variant
    cfg = cfg.with_(**changes)
    cfg.validate()
    return cfg


def _checkpoint(args, cfg: RunConfig) -> Path:
    return args.checkpoint or Path(cfg.out) / MODEL_CKPT


def _run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "train":
        res = run_train(cfg, args.stage, resume=args.resume)
        print(json.dumps({"stage1_losses": res.stage1_losses, "stage2_losses": res.stage2_losses[-1:],
                          "out": cfg.out}))
    elif args.command == "eval":
        rec = run_eval(cfg, load_model(_checkpoint(args, cfg), cfg.model))
        print(json.dumps({k: rec[k] for k in ("config_hash", "seed", "pdr", "variant", "mAP", "mATE", "mASE",
                                              "mAOE")}))
    elif args.command == "sweep":
        rows = run_sweep(cfg, load_model(_checkpoint(args, cfg), cfg.model))
        for r in rows:
            print(f"{r['pdr']:.2f},{r['variant']},{r['mAP']:.4f},{r['mATE']:.4f},{r['mASE']:.4f},{r['mAOE']:.4f}")
    elif args.command == "ablate":
        names = [n.strip() for n in args.only.split(",")] if args.only else None
        for r in run_ablation(cfg, names=names):
            print(f"{r['name']},{r['mAP']:.4f}")
    elif args.command == "gen-scenario":
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, sc_cfg in enumerate(scene_configs(cfg.scenario, args.count, cfg.seed)):
            save_scenario_config(sc_cfg, out / f"scene_{i:04d}.yaml")
            write_replay(generate_scenario(sc_cfg), out / f"scene_{i:04d}.jsonl")
        print(f"wrote {args.count} scene(s) to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointMissingError, CheckpointError, PacketError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
