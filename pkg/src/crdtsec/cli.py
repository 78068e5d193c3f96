"""Command-line front end.

Exit codes: 0 converged, 1 diverged, 2 axiom violation or interpretation
failure, 3 usage or input error.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys

from . import trace
from .checker import (
    BoundExceeded,
    ConfigError,
    Scenario,
    brute_force_convergence,
    load_oracle_spec,
    render_report,
    replay_trace,
    run_campaign,
    run_fuzz,
)
from .datatype import DATATYPES
from .network import IllegalAction

USAGE_ERROR = 3
SEED_ENV = "CRDTSEC_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--report", choices=("text", "json"), default="text")

    parser = _Parser(prog="crdtsec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fuzz = sub.add_parser("fuzz", parents=[common], help="run seeded simulations")
    fuzz.add_argument("--datatype", choices=DATATYPES)
    fuzz.add_argument("--nodes", type=int, default=3)
    fuzz.add_argument("--ops", type=int, default=20, help="random broadcasts per run")
    fuzz.add_argument("--seed", type=int, default=_default_seed(), help=f"default from ${SEED_ENV}")
    fuzz.add_argument("--drop-rate", type=float, default=0.0)
    fuzz.add_argument("--crash-rate", type=float, default=0.0)
    fuzz.add_argument("--partition-rate", type=float, default=0.0)
    fuzz.add_argument("--script", help="trace file whose records run before the random phase")
    fuzz.add_argument("--emit-trace", metavar="FILE")
    fuzz.add_argument("--runs", type=int, default=1, help="consecutive seeds to run")
    fuzz.add_argument("--jobs", type=int, default=1)

    replay = sub.add_parser("replay", parents=[common], help="re-execute a trace")
    replay.add_argument("--trace", action="append", required=True,
                        help="trace file; repeat to merge per-node logs")

    oracle = sub.add_parser("oracle", parents=[common], help="enumerate hb-consistent orders")
    oracle.add_argument("--datatype", choices=DATATYPES)
    oracle.add_argument("--spec", required=True)
    oracle.add_argument("--bound", type=int, default=7)

    serve = sub.add_parser("serve", help="run one TCP replica; commands on stdin")
    serve.add_argument("--config", required=True)
    serve.add_argument("--log", metavar="FILE", help="write this node's trace log on exit")
    return parser


def _fuzz(args) -> int:
    script: tuple = ()
    datatype, nodes = args.datatype, args.nodes
    if args.script:
        header, records = trace.read_trace(args.script)
        script = tuple(records)
        datatype = datatype or header.datatype
        if header.datatype != datatype:
            raise ConfigError("script datatype does not match --datatype")
        nodes = header.nodes
    if datatype is None:
        raise ConfigError("--datatype is required")
    base = Scenario(
        datatype=datatype, nodes=nodes, seed=args.seed, op_budget=args.ops,
        drop_rate=args.drop_rate, crash_rate=args.crash_rate,
        partition_rate=args.partition_rate, script=script,
    )
    base.validate()
    if args.runs < 1:
        raise ConfigError("--runs must be at least 1")
    if args.runs == 1:
        report = run_fuzz(base, emit_trace=args.emit_trace)
        sys.stdout.write(render_report(report, args.report))
        return report.exit_code
    if args.emit_trace:
        raise ConfigError("--emit-trace needs a single run")
    scenarios = [Scenario(**{**base.__dict__, "seed": args.seed + k}) for k in range(args.runs)]
    worst = 0
    for seed, report in run_campaign(scenarios, jobs=args.jobs):
        if args.report == "json":
            sys.stdout.write(render_report(report, "json"))
        else:
            print(f"seed {seed}: {report.verdict}")
        worst = max(worst, report.exit_code)
    return worst


def _replay(args) -> int:
    report = replay_trace(*args.trace)
    sys.stdout.write(render_report(report, args.report))
    return report.exit_code


def _oracle(args) -> int:
    dt, messages, pairs = load_oracle_spec(args.spec)
    if args.datatype and args.datatype != dt.name:
        raise ConfigError(f"spec is for {dt.name}, not {args.datatype}")
    report = brute_force_convergence(messages, pairs, dt, bound=args.bound)
    sys.stdout.write(render_report(report, args.report))
    return report.exit_code


def _serve(args) -> int:
    from .transport import PeerConfig, serve

    config = PeerConfig.load(args.config)
    asyncio.run(serve(config, log_path=args.log))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"fuzz": _fuzz, "replay": _replay, "oracle": _oracle, "serve": _serve}
    try:
        return handlers[args.command](args)
    except (ConfigError, BoundExceeded, trace.ParseError, IllegalAction, OSError, ValueError, KeyError) as exc:
        print(f"crdtsec: error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
