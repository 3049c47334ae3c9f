"""``c2c-sim``: run scenarios, run the threat checks, dump node state.

Exit codes: 0 success, 1 internal error or a failed threat check, 2 invalid
configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigInvalid, UnknownNode
from .netsim import message_count_energy_proxy
from .ownership import replay_create_ownership
from .scenario import ScenarioConfig, build_world, run_setup, run_world
from .threats import run_threat_checks

EXIT_OK, EXIT_ERROR, EXIT_CONFIG = 0, 1, 2


def _seed(cli_seed: Optional[int]) -> Optional[int]:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("C2C_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigInvalid(f"C2C_SEED must be an integer, got {env!r}") from None


def _load(path: str, seed: Optional[int]) -> ScenarioConfig:
    config = ScenarioConfig.load(path)
    seed = _seed(seed)
    return replace(config, seed=seed) if seed is not None else config


def cmd_run(args) -> int:
    config = _load(args.file, args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigInvalid(f"output directory {out} is not writable: {exc}") from None
    metrics = run_world(build_world(config))
    (out / "metrics.csv").write_text(metrics.csv_text())
    summary = metrics.summary()
    summary["frames"] = message_count_energy_proxy(metrics)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(f"{metrics.scenario}: sent={metrics.sent} delivered={metrics.delivered} "
              f"rate={metrics.delivery_rate:.4f} median={summary['median_delay_ms']} ms "
              f"goodput={metrics.goodput_bps:.2f} B/s -> {out}")
    return EXIT_OK


def cmd_threats(args) -> int:
    results = run_threat_checks(seed=_seed(args.seed) or 0,
                                cookie_enabled=not args.no_cookie,
                                enforce_lifetime=not args.no_lifetime)
    for r in results:
        print(r.line())
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} threat checks passed")
    return EXIT_OK if passed == len(results) else EXIT_ERROR


def cmd_dump(args) -> int:
    if args.config:
        world = build_world(_load(args.config, args.seed))
        run_setup(world)
        node = world.node(args.node)
    else:
        node = replay_create_ownership(_seed(args.seed) or 0).node(args.node)
    print(json.dumps(node.dump(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2c-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file and write metrics.csv and summary.json")
    run.add_argument("file")
    run.add_argument("--seed", type=int, help="overrides the file's seed (fallback: $C2C_SEED)")
    run.add_argument("--out", default="out", help="output directory (default: ./out)")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    threats = sub.add_parser("threats", help="run the T0-T3 threat checks")
    threats.add_argument("--seed", type=int)
    threats.add_argument("--no-cookie", action="store_true", help=argparse.SUPPRESS)
    threats.add_argument("--no-lifetime", action="store_true", help=argparse.SUPPRESS)
    threats.set_defaults(func=cmd_threats)

    dump = sub.add_parser("dump", help="print a node's accounts, ACL instances and observations")
    dump.add_argument("node")
    dump.add_argument("--config", help="scenario file; its setup phase is run before dumping. "
                                       "Without it the create-ownership replay (c1, c3, s1, s2) is used")
    dump.add_argument("--seed", type=int)
    dump.set_defaults(func=cmd_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnknownNode as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # report rather than dump a traceback on the user
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
