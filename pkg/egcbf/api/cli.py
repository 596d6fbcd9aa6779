"""
Command-line interface.

    egcbf train  [--trunk T] [--reference R] [--iterations N] [--resume CKPT]
    egcbf eval   --checkpoint CKPT [--method M] [--episodes N] [--log-dir DIR] [--dump-graphs FILE]
    egcbf sweep  --checkpoint CKPT [--sizes N ...] [--side-length L] [--obstacles K] [--episodes N]
    egcbf check  {all,group,dynamics,equivariance,gradients,qp,constraint,lemma2} [--cases N] [--graph FILE]
    egcbf replay LOG [--verify]

Every command accepts --config FILE, repeated --set section.key=value, --output DIR
and --workers N. Exit codes: 0 success, 1 usage, 2 check failure, 3 runtime failure.
"""

import argparse
import json
import sys
from dataclasses import asdict, replace

from pydantic import ValidationError

from egcbf.exceptions import EgcbfError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment TOML file")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    common.add_argument("--output", help="Output directory")
    common.add_argument("--workers", type=int, help="Parallel episode workers")

    parser = _Parser(prog="egcbf", description="Equivariant graph CBF training and evaluation")
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser, help="Command to run")

    # Train
    p_train = subparsers.add_parser("train", parents=[common], help="Train policy and CBF")
    p_train.add_argument("--trunk", choices=["equivariant", "relative", "raw"])
    p_train.add_argument("--reference", choices=["qp", "nominal"], help="qp imitates pi_QP, nominal imitates pi_nom")
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--resume", help="Checkpoint to continue from")

    # Eval
    p_eval = subparsers.add_parser("eval", parents=[common], help="Evaluate one method in-distribution")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--method", default="learned", choices=["learned", "learned_qp", "ccbf", "dcbf", "nominal"])
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--log-dir", help="Write one trajectory log per episode")
    p_eval.add_argument("--dump-graphs", help="Write the first episode's graph snapshots (JSONL)")

    # Sweep
    p_sweep = subparsers.add_parser("sweep", parents=[common], help="Zero-shot swarm-size sweep")
    p_sweep.add_argument("--checkpoint")
    p_sweep.add_argument("--sizes", type=int, nargs="+")
    p_sweep.add_argument("--side-length", type=float)
    p_sweep.add_argument("--obstacles", type=int)
    p_sweep.add_argument("--episodes", type=int)
    p_sweep.add_argument("--methods", nargs="+", choices=["learned", "learned_qp", "ccbf", "dcbf", "nominal"])
    p_sweep.add_argument("--name", default="results")
    p_sweep.add_argument("--no-plot", action="store_true")

    # Check
    p_check = subparsers.add_parser("check", parents=[common], help="Run property suites")
    p_check.add_argument(
        "what", nargs="?", default="all",
        choices=["all", "group", "dynamics", "equivariance", "gradients", "qp", "constraint", "lemma2"],
        help="lemma2 is an alias of constraint",
    )
    p_check.add_argument("--cases", type=int, default=100)
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--graph", help="Audit recorded graph snapshots (JSONL)")
    p_check.add_argument("--report", help="Also write the JSON report to this file")

    # Replay
    p_replay = subparsers.add_parser("replay", parents=[common], help="Recompute metrics from a trajectory log")
    p_replay.add_argument("log")
    p_replay.add_argument("--verify", action="store_true", help="Compare against the logged metrics")

    return parser


def _overrides(args) -> list[str]:
    items = list(args.overrides)
    if getattr(args, "trunk", None):
        items.append(f"net.trunk='{args.trunk}'")
    if getattr(args, "reference", None):
        items.append(f"train.reference='{args.reference}'")
    if getattr(args, "iterations", None) is not None:
        items.append(f"train.iterations={args.iterations}")
    return items


def cmd_train(runtime, args) -> int:
    from egcbf.services.learner import train
    from utils.run_manifest import write_manifest

    write_manifest(runtime.output_dir, runtime.config, " ".join(sys.argv))
    result = train(runtime.config, runtime.output_dir, workers=runtime.workers, resume=args.resume)
    print(f"Checkpoint: {result.checkpoint_path}")
    print(f"Learning curve: {result.curve_path}")
    if result.first_reach_iteration is not None:
        print(f"Reach rate first >= 0.5 at iteration {result.first_reach_iteration}")
    return EXIT_OK


def cmd_eval(runtime, args) -> int:
    from egcbf.services.harness import evaluate, write_results
    from utils.run_manifest import write_manifest

    write_manifest(runtime.output_dir, runtime.config, " ".join(sys.argv), seed=runtime.config.eval.seed_base)
    row = evaluate(
        runtime.config,
        checkpoint=args.checkpoint,
        method=args.method,
        episodes=args.episodes,
        workers=runtime.workers,
        log_dir=args.log_dir,
        dump_graphs_path=args.dump_graphs,
    )
    write_results([row], runtime.output_dir, name=f"eval_{args.method}")
    print(json.dumps(row, indent=2))
    return EXIT_OK


def cmd_sweep(runtime, args) -> int:
    from egcbf.services.harness import SweepSpec, plot_safety, sweep, write_results
    from utils.run_manifest import write_manifest

    spec = SweepSpec.from_config(runtime.config, args.checkpoint)
    updates = {
        "swarm_sizes": tuple(args.sizes) if args.sizes else None,
        "side_length": args.side_length,
        "num_obstacles": args.obstacles,
        "episodes": args.episodes,
        "methods": tuple(args.methods) if args.methods else None,
    }
    spec = replace(spec, **{k: v for k, v in updates.items() if v is not None})

    write_manifest(
        runtime.output_dir, runtime.config, " ".join(sys.argv),
        seed=spec.seed_base, extra={"sweep": asdict(spec)},
    )
    rows = sweep(spec, runtime.config, workers=runtime.workers)
    csv_path, json_path = write_results(rows, runtime.output_dir, name=args.name)
    print(f"Results: {csv_path} ({len(rows)} rows)")
    if runtime.config.eval.plot and not args.no_plot and rows:
        svg = plot_safety(rows, runtime.output_dir / f"{args.name}_safety.svg", spec.num_obstacles)
        print(f"Plot: {svg}")
    return EXIT_OK


def cmd_check(runtime, args) -> int:
    from egcbf.services.checks import run_checks

    report = run_checks(args.what, cases=args.cases, seed=args.seed, graph_path=args.graph)
    text = json.dumps(report, indent=2)
    print(text)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cmd_replay(runtime, args) -> int:
    from egcbf.services.harness import replay_log

    out = replay_log(args.log, verify=args.verify)
    print(json.dumps(out, indent=2))
    if args.verify and not out["verified"]:
        return EXIT_CHECK_FAILED
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    from egcbf import create_app

    try:
        runtime = create_app(args.config, _overrides(args), output_dir=args.output, workers=args.workers)
    except (ValueError, ValidationError, FileNotFoundError, RuntimeError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](runtime, args)
    except (EgcbfError, OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
