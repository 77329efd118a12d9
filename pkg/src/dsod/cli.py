"""Command-line entry point: one subcommand per pipeline stage, sharing a run directory."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness as H

STAGES = ("generate", "pretrain", "sweep", "adapt", "distill", "evaluate", "analyze")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _w_star(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.replace(",", " ").split()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or any(w < 0 for w in parts):
        raise argparse.ArgumentTypeError("--w-star takes one or three non-negative weights")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [run] and per-stage sections")
    common.add_argument("--seed", type=_u64, help="run seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory shared by all stages")
    common.add_argument("--delta", type=float, help="pseudo-label confidence threshold")
    common.add_argument("--lambda1", type=float, help="feature regularization weight")
    common.add_argument("--lambda2", type=float, help="static-teacher hard loss weight")
    common.add_argument("--lambda3", type=float, help="static-teacher soft loss weight")
    common.add_argument("--w-star", type=_w_star, help="pin the fusion weight(s) and skip the sweep")
    common.add_argument("--no-ufi", action="store_true", help="disable foundation feature injection")
    common.add_argument("--no-safr", action="store_true", help="disable the feature regularizer")
    common.add_argument("--no-daaw", action="store_true", help="no stability sweep and no warmup ramp")
    common.add_argument("--box-fusion", action="store_true", help="merge teacher boxes instead of losses")
    common.add_argument("--init", choices=("dsod", "source"), help="student initialization for distillation")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dsod", description="Source-free detection adaptation on synthetic domains.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "render the benchmark pair into OUT/data",
        "pretrain": "train the source detector and the foundation surrogate",
        "sweep": "stability sweep of the fusion weight",
        "adapt": "Stage-I mean-teacher adaptation",
        "distill": "Stage-II dual-teacher distillation",
        "evaluate": "AP50 of every checkpoint in OUT",
        "analyze": "feature orthogonality report",
    }
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args: argparse.Namespace) -> H.RunConfig:
    """Config file first, then command-line flags on top."""
    rc = H.load_config(args.config)
    adapt, sweep, distill = rc.adapt, rc.sweep, rc.distill
    if args.seed is not None:
        rc = dataclasses.replace(rc, seed=args.seed)
    if args.delta is not None:
        adapt = dataclasses.replace(adapt, delta=args.delta)
        distill = dataclasses.replace(distill, delta_ema=args.delta, delta_static=args.delta)
    if args.lambda1 is not None:
        adapt = dataclasses.replace(adapt, lambda1=args.lambda1)
    if args.lambda2 is not None:
        distill = dataclasses.replace(distill, lambda2=args.lambda2)
    if args.lambda3 is not None:
        distill = dataclasses.replace(distill, lambda3=args.lambda3)
    if args.w_star is not None:
        adapt = dataclasses.replace(adapt, w_star=args.w_star)
        sweep = dataclasses.replace(sweep, enabled=False)
    if args.no_ufi:
        adapt = dataclasses.replace(adapt, use_ufi=False)
    if args.no_safr:
        adapt = dataclasses.replace(adapt, use_safr=False)
    if args.no_daaw:
        adapt = dataclasses.replace(adapt, warmup_iters=1)
        sweep = dataclasses.replace(sweep, enabled=False)
    if args.box_fusion:
        distill = dataclasses.replace(distill, box_fusion=True)
    if args.init is not None:
        distill = dataclasses.replace(distill, init=args.init)
    return dataclasses.replace(rc, adapt=adapt, sweep=sweep, distill=distill)


def run(command: str, rc: H.RunConfig, out: Path) -> dict:
    """Execute one stage and return a short JSON-able summary."""
    if command == "generate":
        return {"data": str(H.stage_generate(rc, out))}
    if command == "pretrain":
        res = H.stage_pretrain(rc, out)
        return {"source_ap50": res["source_eval"]["ap50"], "target_ap50": res["target_eval"]["ap50"]}
    if command == "sweep":
        report = H.stage_sweep(rc, out)
        return {"w_star": report.w_star, "s_joint": report.s_joint}
    if command == "adapt":
        res = H.stage_adapt(rc, out)
        return {"w_star": list(res.w_star), "target_ap50": res.evaluation["ap50"], "best_target_ap50": res.best_evaluation["ap50"]}
    if command == "distill":
        res = H.stage_distill(rc, out)
        return {"target_ap50": res.evaluation["ap50"], "best_target_ap50": res.best_evaluation["ap50"]}
    if command == "evaluate":
        res = H.stage_evaluate(rc, out)
        return {stage: {split: r["ap50"] for split, r in v.items()} for stage, v in res.items()}
    if command == "analyze":
        return {"rows": len(H.stage_analyze(rc, out))}
    raise ValueError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args)
        summary = run(args.command, rc, args.out)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"dsod {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
