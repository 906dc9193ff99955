"""Command-line interface: ``feederid simulate | estimate | evaluate | feeder validate``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import DataError, NumericalError, OutputExistsError
from .evaluation import BUNDLED_FEEDERS, ExperimentConfig, emit_outputs, load_feeder, mape, run_experiment
from .powerflow import ParameterIndex
from .simulation import (
    NoiseSpec,
    add_measurement_noise,
    default_dynamics,
    equilibrium,
    load_dynamics,
    read_measurements,
    simulate,
    write_measurements,
)
from .stage2 import PipelineOptions, run_pipeline, write_estimates

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _noise_list(text):
    try:
        levels = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not levels or any(s < 0 for s in levels):
        raise argparse.ArgumentTypeError("noise levels must be non-negative")
    return levels


def _check_out(path: Path, force: bool):
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass --force to overwrite")


def cmd_simulate(args) -> int:
    net = load_feeder(args.feeder)
    if args.dynamics:
        dyn = load_dynamics(args.dynamics, net)
    else:
        dyn = default_dynamics(net, seed=args.seed, sigma=args.process_sigma)
    out = Path(args.out)
    _check_out(out, args.force)
    op = equilibrium(net, dyn)
    series = simulate(net, dyn, op, args.dt, args.samples, seed=args.seed)
    if args.noise:
        series = add_measurement_noise(series, NoiseSpec(std=args.noise, power=args.noise_power),
                                       seed=args.seed + 1, net=net)
    write_measurements(series, out)
    print(f"wrote {series.samples} samples x {len(series.nodes)} nodes to {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    net = load_feeder(args.feeder)
    series = read_measurements(args.measurements, dt=args.dt)
    out = Path(args.out)
    _check_out(out, args.force)
    est = run_pipeline(net, series, PipelineOptions(lag=args.lag))
    truth = ParameterIndex(net, connected_only=True).true_theta() if args.truth else None
    write_estimates(est, out, truth)
    res = est.refinement
    print(f"stage 2: {res.status} after {res.iterations} iterations, |mismatch| = {res.mismatch_norm:.3e}")
    if truth is not None:
        n = len(est.index)
        for label, theta in (("stage 1", est.initial), ("stage 2", est.refined)):
            print(f"{label}: MAPE(G) = {mape(truth[:n], theta[:n]):.4g}%  "
                  f"MAPE(B) = {mape(truth[n:], theta[n:]):.4g}%")
    print(f"wrote {out} ({est.seconds:.2f} s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name, attr in (("seed", "master_seed"), ("samples", "samples"), ("dt", "dt"), ("lag", "lag"),
                       ("replicates", "replicates"), ("workers", "workers"), ("feeder", "feeder")):
        value = getattr(args, name)
        if value is not None:
            overrides[attr] = value
    if args.noise is not None:
        overrides["noise_levels"] = tuple(args.noise)
    out = args.out or config.out
    if out is None:
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    overrides["out"] = str(out)
    config = replace(config, **overrides)
    out = Path(out)
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
    report = run_experiment(config)
    emit_outputs(report, out, force=args.force)
    for s in config.noise_levels:
        print(f"noise {s:g}: median MAPE(B) stage 1 {report.median(s, 'stage1'):.4g}%, "
              f"stage 2 {report.median(s):.4g}%")
    if report.failures:
        print(f"{len(report.failures)} run(s) failed; see {out / 'failures.csv'}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_feeder_validate(args) -> int:
    net = load_feeder(args.feeder)
    nodes = net.bus_phases()
    print(f"{args.feeder}: ok - {len(net.buses)} buses, {len(net.branches)} branches, {len(nodes)} bus-phase nodes, "
          f"slack {net.slack.id}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="feederid", description="Line-parameter identification from simulated micro-PMU data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    feeder_help = f"feeder JSON file or a bundled name ({', '.join(BUNDLED_FEEDERS)})"

    s = sub.add_parser("simulate", help="simulate a measurement series")
    s.add_argument("feeder", help=feeder_help)
    s.add_argument("--dynamics", help="load-dynamics JSON (default: random loads from --seed)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=_positive_int, default=3600)
    s.add_argument("--dt", type=_positive_float, default=0.02)
    s.add_argument("--noise", type=float, default=0.0, help="relative measurement-noise std (0: none)")
    s.add_argument("--noise-power", choices=("recompute", "additive"), default="additive")
    s.add_argument("--process-sigma", type=float, default=1.0)
    s.add_argument("--out", required=True, help="measurement CSV to write")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate line parameters from a measurement CSV")
    e.add_argument("feeder", help=feeder_help + "; only connectivity and phases are used for estimation")
    e.add_argument("measurements")
    e.add_argument("--lag", type=_positive_int, default=1)
    e.add_argument("--dt", type=_positive_float, help="sample interval if the CSV has no metadata")
    e.add_argument("--no-truth", dest="truth", action="store_false",
                   help="leave the true-value columns empty")
    e.add_argument("--out", required=True, help="estimate CSV to write")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="run a Monte Carlo experiment")
    v.add_argument("config", nargs="?", help="experiment config JSON (default settings if omitted)")
    v.add_argument("--feeder")
    v.add_argument("--seed", type=int, help="master seed")
    v.add_argument("--samples", type=_positive_int)
    v.add_argument("--dt", type=_positive_float)
    v.add_argument("--lag", type=_positive_int)
    v.add_argument("--noise", type=_noise_list, help="comma-separated noise levels")
    v.add_argument("--replicates", type=_positive_int)
    v.add_argument("--workers", type=_positive_int)
    v.add_argument("--out", help="output directory")
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("feeder", help="feeder file utilities")
    fsub = f.add_subparsers(dest="feeder_command", required=True, parser_class=_Parser)
    fv = fsub.add_parser("validate", help="check a feeder file against the schema")
    fv.add_argument("feeder", help=feeder_help)
    fv.set_defaults(func=cmd_feeder_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"feederid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"feederid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"feederid: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
