"""
Module: cli
-----------

Command-line entry point (``python -m app.cli``).

Subcommands:
- gen-scenes    write a directory of POSC scene files
- train         train from a fresh initialization, write a POCC checkpoint and
                the per-epoch CSV log
- eval          branch-0 mIoU / IoU of a checkpoint on a scene directory
- ablate        run a grid (JSON file or preset) and write per-run and summary
                tables
- gradcheck     gradient suite, optionally a single operation
- oracle-check  oracle suite, optionally a single check
- serve         start the HTTP API with uvicorn

Exit codes: 0 success, 1 validation failure (including a failed check), 2 I/O
or file-format error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn

from app.core.config import get_settings
from app.schemas.config import ExperimentConfig
from app.services.ablation_service import ablate, load_grid
from app.services.check_service import run_suite
from app.services.checkpoint_service import load_checkpoint, save_checkpoint
from app.services.export_service import format_table, write_export
from app.services.scene_service import (
    build_rig,
    generate_scene_set,
    load_scene_set,
    save_scene_set,
)
from app.services.training_service import evaluate, train
from app.utils.errors import EXIT_OK, EXIT_VALIDATION, exit_code_for
from app.utils.logger import configure_logging

logger = logging.getLogger(__name__)


def _load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.load(path)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2))


# --------------------------
# Commands
# --------------------------


def cmd_gen_scenes(args) -> int:
    config = _load_config(args.config)
    scenes = generate_scene_set(config, args.count, args.seed)
    paths = save_scene_set(args.out, scenes, build_rig(config.rig))
    print(f"wrote {len(paths)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    scenes = load_scene_set(args.scenes)
    val_scenes = load_scene_set(args.val) if args.val else []
    checkpoint, log = train(config, scenes, seed, val_scenes)
    save_checkpoint(checkpoint, args.out)
    if not log.records:
        print(f"no epochs run, checkpoint {args.out}")
        return EXIT_OK
    if args.log:
        write_export(log.rows(), args.log)
    final = log.records[-1]
    print(f"trained {len(log)} epochs, final loss {final.total:.6f}, checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    result = evaluate(checkpoint, load_scene_set(args.scenes))
    _print_json(result.model_dump())
    if args.out:
        Path(args.out).write_text(result.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    grid = load_grid(args.grid, args.seeds)
    table = ablate(config, grid, args.workers)
    write_export(table.records(), args.out)
    summary = [row.model_dump() for row in table.summary()]
    summary_path = Path(args.summary) if args.summary else Path(args.out).with_suffix(".txt")
    write_export(summary, summary_path)
    print(format_table(summary))
    return EXIT_OK


def _run_checks(suite: str, args) -> int:
    report = run_suite(suite, args.op, args.instances)
    print(format_table([r.model_dump(exclude={"suite"}) for r in report.results]))
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_gradcheck(args) -> int:
    return _run_checks("gradient", args)


def cmd_oracle_check(args) -> int:
    return _run_checks("oracle", args)


def cmd_serve(args) -> int:
    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# --------------------------
# Parser
# --------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoocc", description="Desk-scale prototype-aware occupancy network"
    )
    parser.add_argument("--log-level", default=None, help="Overrides PROTOOCC_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="Generate synthetic POSC scenes")
    p.add_argument("--config")
    p.add_argument("--out", default=get_settings().default_scene_dir)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gen_scenes)

    p = sub.add_parser("train", help="Train a model and write a POCC checkpoint")
    p.add_argument("--config")
    p.add_argument("--scenes", required=True)
    p.add_argument("--val", help="Optional validation scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="Per-epoch metrics (.csv, .json, .txt or .pdf)")
    p.add_argument("--seed", type=int, default=None, help="Defaults to the config seed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", help="Optional JSON result file")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation grid")
    p.add_argument("--config")
    p.add_argument("--grid", required=True, help="Grid JSON file or preset name")
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="Summary table path (defaults to <out>.txt)")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_ablate)

    for name, handler in (("gradcheck", cmd_gradcheck), ("oracle-check", cmd_oracle_check)):
        p = sub.add_parser(name, help=f"Run the {name} suite")
        p.add_argument("--op", default=None)
        p.add_argument("--instances", type=int, default=None)
        p.set_defaults(handler=handler)

    p = sub.add_parser("serve", help="Start the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {getattr(e, 'detail', e)}")
        print(f"error: {getattr(e, 'detail', e)}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
