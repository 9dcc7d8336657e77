"""``powr`` command line: train, verify, eval, dump-config.

Exit codes: 0 success, 1 a check failed, 2 bad configuration or arguments,
3 numerical failure (non-contracting world model, singular solve).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .env import make_env
from .errors import ConfigError
from .harness import ExperimentConfig, aggregate_curves, evaluate, run_experiment
from .pmd import SoftmaxPolicy
from .verify import format_table, run_all

EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="powr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p):
        p.add_argument("--config", required=True, help="TOML file or bundled name (gridworld, taxi, mountaincar)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config key, e.g. kernel.sigma=0.15 (repeatable)")
        p.add_argument("--env", help="shorthand for --override env=ID")
        p.add_argument("--seed", type=int, help="run this seed only")

    train = sub.add_parser("train", help="run the collect/fit/PMD schedule")
    config_args(train)
    train.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
    train.add_argument("--out", help="directory for curve.csv, diagnostics.jsonl and policies")

    verify = sub.add_parser("verify", help="run the operator identity suite")
    verify.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="replay a saved policy")
    ev.add_argument("--policy", required=True, help="policy .npz written by train")
    ev.add_argument("--env", help="environment id (defaults to the one stored with the policy)")
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)

    dump = sub.add_parser("dump-config", help="print the effective config as TOML")
    config_args(dump)
    return parser


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.env:
        overrides.append(f'env="{args.env}"')
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if getattr(args, "out", None):
        overrides.append(f'out="{args.out}"')
    return ExperimentConfig.from_toml(args.config, overrides)


def _train(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be positive")
    config = _load_config(args)
    curves = run_experiment(config, jobs=args.jobs)
    print("timesteps,mean,min,max")
    for t, mean, lo, hi in aggregate_curves(curves):
        print(f"{t},{mean:.4f},{lo:.4f},{hi:.4f}")
    return 0


def _verify(args) -> int:
    results = run_all(args.seed)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else EXIT_FAIL


def _eval(args) -> int:
    try:
        policy, meta = SoftmaxPolicy.load(args.policy)
    except FileNotFoundError as exc:
        raise ConfigError(f"policy file not found: {args.policy}") from exc
    env_id = args.env or meta.get("env")
    if env_id is None:
        raise ConfigError("the policy file names no environment; pass --env")
    try:
        env = make_env(env_id)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.episodes < 1:
        raise ConfigError("--episodes must be positive")
    mean, lo, hi = evaluate(policy, env, args.episodes, args.seed)
    print(f"env={env_id} episodes={args.episodes} mean={mean:.4f} min={lo:.4f} max={hi:.4f}")
    return 0


def _dump(args) -> int:
    sys.stdout.write(_load_config(args).to_toml())
    return 0


COMMANDS = {"train": _train, "verify": _verify, "eval": _eval, "dump-config": _dump}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"powr: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"powr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"powr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
