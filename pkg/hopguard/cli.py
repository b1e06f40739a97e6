import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from hopguard.analytics import AnalyticParams, analyze_table
from hopguard.config import FULL_TRIALS, ExperimentConfig, load_config, parse_range
from hopguard.harness import run_experiment, run_trial, selftest, write_grid_csv
from hopguard.sim.protocol import write_trace

log = logging.getLogger(__name__)

MODES = {"classic": "classic", "hop": "hopping", "hopping": "hopping", "auto": "auto"}
ANALYZE_COLUMNS = [
    "theta_over_x",
    "exact",
    "hoeffding",
    "union",
    "windowed",
    "hopped",
    "gain",
    "gain_exact",
]


RANGE_OPTIONS = ("--sir", "--tsy", "--theta-over-x")


def normalize_argv(argv: list[str]) -> list[str]:
    """Join range options to their values so "--sir -20:-30:2" is not read as a flag."""
    joined: list[str] = []
    args = iter(argv)
    for arg in args:
        if arg in RANGE_OPTIONS:
            value = next(args, None)
            if value is not None and value.startswith("-"):
                joined.append(f"{arg}={value}")
                continue
            joined.append(arg)
            if value is not None:
                joined.append(value)
            continue
        joined.append(arg)
    return joined


def _run_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="YAML experiment file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--trials", type=int, help="trials per grid cell")
    parser.add_argument("--full", action="store_true", help=f"{FULL_TRIALS} trials per cell")
    parser.add_argument("--mode", choices=sorted(MODES), help="ranging mode")
    parser.add_argument("--out", type=Path, help="CSV output path (stdout if omitted)")
    parser.add_argument("--records", type=Path, help="directory of per-cell records, enables resume")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--debug-cir", type=Path, help="directory for CIR trace dumps")
    parser.add_argument(
        "--deterministic", action="store_true", help="omit the timestamp header line"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopguard",
        description="Ghost Peak attack simulation against UWB DS-TWR with random time hopping",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run the grid from a configuration file")
    _run_options(simulate)

    sweep = commands.add_parser("sweep", help="run a grid given on the command line")
    _run_options(sweep)
    sweep.add_argument("--sir", help="SIR grid in dB, start:stop:step")
    sweep.add_argument("--tsy", help="sync time grid in us, start:stop:step")

    ranging = commands.add_parser("range", help="one verbose ranging round")
    ranging.add_argument("--config", type=Path)
    ranging.add_argument("--seed", type=int)
    ranging.add_argument("--mode", choices=sorted(MODES))
    ranging.add_argument("--sir", type=float, default=-26.0)
    ranging.add_argument("--tsy", type=float, default=-1.0)
    ranging.add_argument("--trial", type=int, default=0)
    ranging.add_argument("--no-attack", action="store_true")
    ranging.add_argument("--trace", type=Path, help="session trace CSV")
    ranging.add_argument("--debug-cir", type=Path)

    analyze = commands.add_parser("analyze", help="closed-form success probabilities")
    analyze.add_argument("--n", type=int, default=64)
    analyze.add_argument("--theta-over-x", default="0:64:4")
    analyze.add_argument("--d-max-m", type=float, default=15.0)
    analyze.add_argument("--t-sfd-ns", type=float, default=0.0)
    analyze.add_argument("--t-payload-ns", type=float, default=20.0)
    analyze.add_argument("--hop-min-us", type=float, default=-2.5)
    analyze.add_argument("--hop-max-us", type=float, default=2.5)
    analyze.add_argument("--offsets", type=int, default=801)
    analyze.add_argument("--out", type=Path)

    commands.add_parser("selftest", help="run invariant checks")
    return parser


def _configure_logging(verbosity: int):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    trials = FULL_TRIALS if getattr(args, "full", False) else getattr(args, "trials", None)
    cfg = cfg.with_overrides(
        trials=trials,
        master_seed=args.seed,
        mode=MODES[args.mode] if args.mode else None,
    )
    if getattr(args, "sir", None) and isinstance(args.sir, str):
        cfg = replace(cfg, sir_db=parse_range(args.sir))
    if getattr(args, "tsy", None) and isinstance(args.tsy, str):
        cfg = replace(cfg, tsy_us=parse_range(args.tsy))
    return cfg


def _grid(args: argparse.Namespace) -> int:
    if args.command == "simulate" and not args.config:
        raise ValueError("simulate needs --config")
    cfg = _experiment(args)
    result = run_experiment(
        cfg,
        workers=args.workers,
        records_dir=args.records,
        progress=sys.stderr.isatty(),
        cir_dump=args.debug_cir,
    )
    write_grid_csv(result, args.out, deterministic=args.deterministic, stream=sys.stdout)
    return 0


def _range(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    if args.no_attack:
        cfg = replace(cfg, attack_enabled=False)
    logging.getLogger("hopguard").setLevel(logging.INFO)
    record = run_trial(
        cfg,
        args.sir,
        args.tsy,
        args.trial,
        debug=True,
        cir_dump=str(args.debug_cir) if args.debug_cir else None,
    )
    for event in record.events:
        rx_time = event["rx_time"]
        received = "-" if rx_time is None else f"{rx_time * 1e6:12.6f} us"
        print(
            f"{event['message']:>8}  tx {event['tx_epoch'] * 1e6:12.6f} us  rx {received}  "
            f"counter {event['counter']:#034x}  {event['failure'] or 'ok'}"
        )
    distance = "n/a" if record.distance_m is None else f"{record.distance_m:.3f} m"
    print(
        f"distance {distance}  hop {record.hop_delay * 1e6:.3f} us  "
        f"attack_success {record.attack_success}  detection {record.detection}  "
        f"failure {record.failure or '-'}"
    )
    if args.trace:
        write_trace([record], args.trace)
    return 0


def _analyze(args: argparse.Namespace) -> int:
    base = AnalyticParams.from_geometry(
        n=args.n,
        theta=1.0,
        x_t=1.0,
        t_sfd=args.t_sfd_ns * 1e-9,
        t_payload=args.t_payload_ns * 1e-9,
        d_max_m=args.d_max_m,
        t_min_hop=args.hop_min_us * 1e-6,
        t_max_hop=args.hop_max_us * 1e-6,
    )
    rows = analyze_table(base, list(parse_range(args.theta_over_x)), args.offsets)
    handle = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(handle, fieldnames=ANALYZE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            handle.close()
    return 0


def _selftest(args: argparse.Namespace) -> int:
    results = selftest()
    for name, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return 0 if all(passed for _, passed in results) else 1


COMMANDS = {
    "simulate": _grid,
    "sweep": _grid,
    "range": _range,
    "analyze": _analyze,
    "selftest": _selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(normalize_argv(sys.argv[1:] if argv is None else list(argv)))
    _configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, yaml.YAMLError, OSError) as error:
        print(f"hopguard: error: {error}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
