"""Command-line entry point: ``gensar <subcommand> [options]``.

Exit codes: 0 success, 2 missing input, 3 invalid configuration (including a
refused overwrite), 4 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline as pl
from .corpus import TASKS
from .errors import ConfigError, MissingInputError, NumericalError

log = logging.getLogger("gensar")

EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERICAL = 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [run] [synth] [rqvae] [model] [eval] [tasks] sections")
    common.add_argument("--workdir", type=Path, help="output directory (the GENSAR_WORKDIR variable takes precedence)")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--tasks", help=f"comma-separated subset of {','.join(TASKS)}")
    common.add_argument("--no-behavior-token", action="store_true")
    common.add_argument("--negatives", choices=("random", "bm25"), help="search negatives")
    common.add_argument("--beam-width", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gensar", description="Joint search and recommendation generative retrieval pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus and embeddings")
    sub.add_parser("train-ids", parents=[common], help="train the joint residual-quantized autoencoder")
    sub.add_parser("export-ids", parents=[common], help="write item identifiers and the token vocabulary")
    sub.add_parser("build-data", parents=[common], help="render training and evaluation instructions")
    sub.add_parser("train-model", parents=[common], help="train the encoder-decoder")
    sub.add_parser("evaluate", parents=[common], help="score 100-item candidate lists and write the report")
    cr = sub.add_parser("collision-report", parents=[common], help="collision rates of the exported identifiers")
    cr.add_argument("--baselines", action="store_true", help="also train semantic-only and collaborative-only quantizers")
    ab = sub.add_parser("ablate", parents=[common], help="retrain and evaluate with components removed")
    ab.add_argument("names", nargs="+", choices=pl.ABLATIONS)
    sub.add_parser("run", parents=[common], help="all stages from synth to evaluate")
    return p


def build_config(args) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config)
    if args.workdir is not None and not pl.os.environ.get(pl.ENV_WORKDIR):
        cfg.workdir = args.workdir
    if args.seed is not None:
        cfg.seed = args.seed
    flags = dataclasses.asdict(cfg.flags)
    if args.tasks is not None:
        chosen = [t.strip() for t in args.tasks.split(",") if t.strip()]
        unknown = set(chosen) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown task(s) {sorted(unknown)}")
        flags.update({t: t in chosen for t in TASKS})
    if args.no_behavior_token:
        flags["behavior_token"] = False
    cfg.flags = pl.TaskFlags(**flags)
    ev = dataclasses.asdict(cfg.eval)
    if args.negatives is not None:
        ev["negatives"] = args.negatives
    if args.beam_width is not None:
        ev["beam_width"] = args.beam_width
    cfg.eval = pl.EvalSettings(**ev)
    return cfg


STAGES = {
    "synth": pl.stage_synth,
    "train-ids": pl.stage_train_ids,
    "export-ids": pl.stage_export_ids,
    "build-data": pl.stage_build_data,
    "train-model": pl.stage_train_model,
    "evaluate": pl.stage_evaluate,
}


def run(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if args.command in STAGES:
            STAGES[args.command](cfg, force=args.force)
        elif args.command == "run":
            print(json.dumps(pl.run_all(cfg, force=args.force), indent=2, sort_keys=True))
        elif args.command == "collision-report":
            print(json.dumps(pl.collision_report(cfg, baselines=args.baselines, force=args.force), indent=2, sort_keys=True))
        elif args.command == "ablate":
            table = pl.ablate(cfg, args.names, force=args.force)
            _print_table(table)
    except MissingInputError as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return 0


def _print_table(table) -> None:
    cols = sorted({k for row in table.values() for k in row if not k.endswith("rel_change")})
    print("ablation".ljust(14) + "".join(c.rjust(24) for c in cols))
    for name, row in table.items():
        cells = [f"{row[c]:.4f} ({100 * row[c + '.rel_change']:+.1f}%)" for c in cols]
        print(name.ljust(14) + "".join(c.rjust(24) for c in cells))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
