import argparse
import json
import logging
import sys

from config import COMMANDS, load_config, resolve_config
from errors import ConfigurationError, SynergyLabError, TrainingError
from experiment_runner import ExperimentRunner

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser():
    parser = argparse.ArgumentParser(description="Synergy discovery lab: DiscoSyn, sequential baselines and transfer")
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run")
    parser.add_argument("runs", nargs="*", help="Run directories (report: many, analyze/eval: one)")
    parser.add_argument("--config", "-c", help="JSON experiment config")
    parser.add_argument("--out", "-o", default="runs/latest", help="Output directory")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Dot-path config override, e.g. train.alpha1=0.05 (repeatable)")
    parser.add_argument("--task-set", choices=("A", "B"), help="Task set id")
    parser.add_argument("--b", type=int, help="Synergy dimension (train and baseline)")
    parser.add_argument("--method", choices=("pca", "ae"), help="Baseline reduction method")
    parser.add_argument("--synergy", help="Synergy checkpoint for transfer / sparse-bench")
    parser.add_argument("--task", help="Unseen task for transfer: cw-valve, cyl-valve, topdown-screw, orth-valve")
    parser.add_argument("--budget", type=int, help="Environment-step budget for sparse-bench")
    parser.add_argument("--seeds", type=int, help="Number of paired seeds for sparse-bench")
    return parser


def flag_overrides(args):
    """Translate convenience flags into dot-path overrides (applied after --override)"""
    items = [f"command={json.dumps(args.command)}"]
    pairs = [
        ("seed", args.seed),
        ("task_set.id", args.task_set),
        ("train.b", args.b),
        ("baseline.b", args.b),
        ("baseline.method", args.method),
        ("transfer.synergy", args.synergy),
        ("transfer.task", args.task),
        ("transfer.budget", args.budget),
        ("transfer.seeds", args.seeds),
    ]
    if args.runs:
        if args.command == "report":
            pairs.append(("report.runs", list(args.runs)))
        elif args.command in ("analyze", "eval"):
            if len(args.runs) != 1:
                raise ConfigurationError(f"{args.command} takes exactly one run directory")
            pairs.append((f"{args.command}.run", args.runs[0]))
        else:
            raise ConfigurationError(f"{args.command} does not take run directories")
    items += [f"{key}={json.dumps(value)}" for key, value in pairs if value is not None]
    return items


def main(argv=None):
    args = build_parser().parse_args(argv)

    try:
        raw, text = load_config(args.config) if args.config else ({}, None)
        resolved = resolve_config(raw, text, list(args.override) + flag_overrides(args))
        runner = ExperimentRunner(resolved, args.out)
    except ConfigurationError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        out_dir = runner.run()
    except ConfigurationError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SynergyLabError as e:
        print(f"Run failed: {e}", file=sys.stderr)
        if isinstance(e, TrainingError) and e.dump_path:
            print(f"State dump: {e.dump_path}", file=sys.stderr)
        return EXIT_RUNTIME

    print(f"Done: {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
