"""Command line entry point: ``metalab <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Failures print one JSON object ``{"error": <category>, "message": ...}`` on
stderr and exit with the category's status code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .commands import (
    DataError,
    MissingArtifact,
    cmd_analyze,
    cmd_gap_report,
    cmd_gen_pool,
    cmd_sweep_inner_steps,
    cmd_sweep_sigma,
    cmd_train,
)
from .config import ConfigError, load_config, parse_config

log = logging.getLogger("metalab")

EXIT_CODES = {
    "internal": 1,
    "config_invalid": 2,
    "io_error": 3,
    "missing_artifact": 4,
    "data_invalid": 5,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--checkpoint", choices=("best", "last"), help="checkpoint selection for analysis")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-pool", parents=[common], help="materialize and save a finite task pool")
    sub.add_parser("train", parents=[common], help="meta-train with MAML; writes curves and checkpoints")
    p = sub.add_parser("analyze", parents=[common], help="dCCA report of a checkpoint")
    p.add_argument("--checkpoint-file", help="explicit checkpoint path")
    sub.add_parser("sweep-sigma", parents=[common], help="train and analyze across a sigma1 grid")
    p = sub.add_parser("sweep-inner-steps", parents=[common], help="dCCA and meta-val loss across inner steps")
    p.add_argument("--checkpoint-file", help="explicit checkpoint path")
    p.add_argument("--steps", type=int, nargs="+", help="override the inner-step list")
    p = sub.add_parser("gap-report", parents=[common], help="meta-generalization gap from a curves CSV")
    p.add_argument("--curves", help="curves CSV (default: <out>/curves.csv)")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else parse_config({})
    cfg = cfg.with_overrides(seed=args.seed, out=args.out, checkpoint=args.checkpoint)
    if getattr(args, "steps", None):
        cfg = parse_config({**cfg.model_dump(), "sweep": {**cfg.sweep.model_dump(), "inner_steps": args.steps}})
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = _config(args)
        if args.command == "gen-pool":
            path, digest = cmd_gen_pool(cfg)
            print(f"{digest}  {path}")
        elif args.command == "train":
            r = cmd_train(cfg)
            print(f"trained {cfg.train.epochs} epochs; best epoch {r.checkpoint_best.epoch} -> {cfg.out}")
        elif args.command == "analyze":
            rep = cmd_analyze(cfg, args.checkpoint_file)
            print(f"dcca {rep.mean:.6f} +- {rep.std:.6f} over {rep.n_episodes} episodes")
        elif args.command == "sweep-sigma":
            rows = cmd_sweep_sigma(cfg)
            print(f"wrote {len(rows)} rows to {cfg.out}/sweep_sigma.csv")
        elif args.command == "sweep-inner-steps":
            rows = cmd_sweep_inner_steps(cfg, args.checkpoint_file)
            print(f"wrote {len(rows)} rows to {cfg.out}/sweep_inner_steps_{cfg.checkpoint}.csv")
        elif args.command == "gap-report":
            _, summary = cmd_gap_report(cfg, args.curves)
            print(f"trough epoch {summary[0]}; last/best meta-val ratio {summary[-1]:.4f}")
    except ConfigError as exc:
        return _fail("config_invalid", exc)
    except MissingArtifact as exc:
        return _fail("missing_artifact", exc)
    except DataError as exc:
        return _fail("data_invalid", exc)
    except OSError as exc:
        return _fail("io_error", exc)
    except ValueError as exc:
        return _fail("data_invalid", exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail("internal", exc)
    return 0


def _fail(category: str, exc: Exception) -> int:
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return EXIT_CODES[category]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
