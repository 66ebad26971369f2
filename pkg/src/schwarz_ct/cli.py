"""``schwarz-ct`` command-line entry point.

Configuration is an INI file with sections ``problem``, ``experiment``,
``grid``, ``partition``, ``gd``, ``integrators``, ``schwarz``, ``eds`` and
``output``; any key can be overridden on the command line as
``--section.key value``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import inspect
import logging
import os
import sys

import numpy as np

from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .ltv_model import REGISTRY
from .ode_engine import IntegrationError
from .reference_solver import TranscriptionError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3

# per-experiment defaults layered under the user's configuration
EXPERIMENT_DEFAULTS = {
    "overlap_sweep": {},
    "integrator_compare": {
        "grid": {"dt_subproblem": "0.05"},
        "partition": {"overlaps": "5"},
        "integrators": {"methods": "FE, BE, RK45"},
        "schwarz": {"max_outer": "20", "stall_window": "none"},
    },
    "stiff_compare": {
        "problem": {"xi": "15", "T": "10", "theta": "10"},
        "grid": {"dt_subproblem": "0.05"},
        "partition": {"overlaps": "5"},
        "integrators": {"methods": "FE, RK23Adaptive"},
        "schwarz": {"max_outer": "30", "stall_window": "none"},
    },
    "eds_boundary": {"problem": {"name": "decay_test"}, "grid": {"dt_reference": "0.01"}},
    "eds_point": {"problem": {"name": "decay_test", "coupled": "true"}, "grid": {"dt_reference": "0.01"}},
    "constants_report": {"problem": {"name": "decay_test"}, "grid": {"dt_reference": "0.01"}},
    "ucc_report": {"problem": {"name": "decay_test"}},
}

# (section, key) -> (ExperimentConfig field, parser)
_FIELDS = {}


def _none_or(parse):
    def wrapped(text):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return wrapped


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _words(text):
    return tuple(v for v in text.replace(",", " ").split())


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _register(section, key, field_name, parse):
    _FIELDS[(section, key)] = (field_name, parse)


for _s, _k, _f, _p in [
    ("experiment", "name", "experiment", str),
    ("grid", "dt_reference", "dt_reference", float),
    ("grid", "dt_subproblem", "dt_subproblem", _none_or(float)),
    ("grid", "reference_route", "reference_route", str),
    ("partition", "m", "m", int),
    ("partition", "overlaps", "overlaps", _floats),
    ("gd", "eta", "eta", float),
    ("gd", "grad_tol", "grad_tol", float),
    ("gd", "max_iters", "max_iters", int),
    ("gd", "seed", "seed", _none_or(int)),
    ("integrators", "methods", "integrators", _words),
    ("integrators", "abs_tol", "abs_tol", float),
    ("integrators", "rel_tol", "rel_tol", float),
    ("schwarz", "max_outer", "max_outer", int),
    ("schwarz", "stop_tol", "stop_tol", float),
    ("schwarz", "stall_window", "stall_window", _none_or(int)),
    ("schwarz", "threads", "threads", _none_or(int)),
    ("schwarz", "parallel", "parallel", _bool),
    ("eds", "sigma", "sigma", float),
    ("eds", "decay_pairs", "decay_pairs", int),
    ("eds", "l0", "l0", _none_or(_floats)),
    ("eds", "lT", "lT", _none_or(_floats)),
    ("eds", "t_prime", "t_prime", _none_or(float)),
    ("eds", "l", "l_point", _none_or(_floats)),
    ("output", "dir", "output_dir", str),
]:
    _register(_s, _k, _f, _p)


class UsageError(Exception):
    pass


def _problem_param(factory, key, text):
    """Parse a problem parameter using the factory's default as a type hint."""
    params = inspect.signature(factory).parameters
    if key not in params:
        raise UsageError(f"problem parameter {key!r} not accepted; valid: {', '.join(params)}")
    default = params[key].default
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, (tuple, list)):
        return _floats(text)
    return float(text)


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Merge defaults, the experiment's defaults, the config file and overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file {path!r} not found")
        parser.read(path)
    layers = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            layers[(section, key)] = value
    layers.update(overrides)
    experiment = layers.get(("experiment", "name"), "overlap_sweep")
    if experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {experiment!r}; available: {', '.join(EXPERIMENTS)}")
    merged = {}
    for section, entries in EXPERIMENT_DEFAULTS[experiment].items():
        for key, value in entries.items():
            merged[(section, key)] = value
    merged.update(layers)

    problem = merged.get(("problem", "name"), "schorlepp_linearized")
    if problem not in REGISTRY:
        raise UsageError(f"unknown problem {problem!r}; available: {', '.join(sorted(REGISTRY))}")
    kwargs = {"problem": problem, "problem_params": {}}
    factory = REGISTRY[problem]
    for (section, key), text in merged.items():
        try:
            if section == "problem":
                if key != "name":
                    if key in inspect.signature(factory).parameters:
                        kwargs["problem_params"][key] = _problem_param(factory, key, text)
                    elif layers.get((section, key)) is not None:
                        raise UsageError(f"problem {problem!r} has no parameter {key!r}")
                continue
            if (section, key) not in _FIELDS:
                raise UsageError(f"unknown configuration key {section}.{key}")
            name, parse = _FIELDS[(section, key)]
            kwargs[name] = parse(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {section}.{key}: {exc}") from None
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


GNUPLOT = """set datafile separator ','
set key autotitle columnhead
set logscale y
set xlabel 'Schwarz iteration k'
set ylabel 'error e_k'
set term pngcairo size 900,600
set output 'errors.png'
plot for [s in SERIES] '< grep ",'.s.'," errors.csv' using 3:4 with linespoints title s
set output 'rates.png'
unset logscale y
set xlabel 'overlap'
set ylabel 'mean rate'
plot 'rates.csv' using 1:2 with points pt 7 title 'measured'{fit}
"""


def write_outputs(cfg: ExperimentConfig, result, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "errors.csv"), ["experiment_id", "overlap_or_solver", "k", "e_k"], result.errors)
    _write_csv(os.path.join(out_dir, "rates.csv"), ["overlap", "mean_rate", "theoretical_bound"], result.rates)
    _write_csv(os.path.join(out_dir, "fit.csv"), ["tau_units", "c_hat", "rho_hat"], result.fit)
    _write_csv(os.path.join(out_dir, "constants.csv"), ["name", "value"], sorted(result.constants.items()))
    for name, rows in result.tables.items():
        if isinstance(rows, dict):
            rows = sorted(rows.items())
        _write_csv(os.path.join(out_dir, f"{name}.csv"), ["c%d" % i for i in range(len(rows[0]))] if rows else [], rows)
    series = sorted({row[1] for row in result.errors})
    fit = ""
    pct = [f for f in result.fit if f[0] == "percent"]
    if pct:
        fit = f", {pct[0][1]!r}*exp(-{pct[0][2]!r}*x) title 'fit'"
    with open(os.path.join(out_dir, "plot.gp"), "w") as fh:
        fh.write(f"SERIES = \"{' '.join(series)}\"\n")
        fh.write(GNUPLOT.format(fit=fit))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(f"experiment {cfg.experiment}\n")
        fh.write(f"problem {cfg.problem} {sorted(cfg.problem_params.items())}\n")
        for note in result.notes:
            fh.write(f"NOTE {note}\n")
        for check in result.checks:
            fh.write(check.line() + ("" if check.mandatory else " (informational)") + "\n")
        fh.write(f"RESULT {'PASS' if result.passed else 'FAIL'}\n")


def _split_overrides(extra: list) -> dict:
    overrides = {}
    it = iter(extra)
    for token in it:
        if not token.startswith("--") or "." not in token:
            raise UsageError(f"unrecognized argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for {token}") from None
        section, name = key.split(".", 1)
        overrides[(section, name)] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schwarz-ct", description="Overlapping Schwarz experiments for LQ optimal control")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment", epilog="any config key may be overridden as --section.key VALUE")
    run.add_argument("--config")
    run.add_argument("--experiment")
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    sub.add_parser("list-problems", help="list registered problems")
    sub.add_parser("list-experiments", help="list experiments")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "list-problems":
        for name, factory in sorted(REGISTRY.items()):
            print(f"{name}{inspect.signature(factory)}")
        return EXIT_OK
    if args.command == "list-experiments":
        print("\n".join(EXPERIMENTS))
        return EXIT_OK
    try:
        overrides = _split_overrides(extra)
        if args.experiment:
            overrides[("experiment", "name")] = args.experiment
        if args.out:
            overrides[("output", "dir")] = args.out
        if args.seed is not None:
            overrides[("gd", "seed")] = str(args.seed)
        if args.threads is not None:
            overrides[("schwarz", "threads")] = str(args.threads)
        cfg = load_config(args.config, overrides)
    except UsageError as exc:
        print(f"schwarz-ct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run_experiment(cfg)
    except (IntegrationError, TranscriptionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"schwarz-ct: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"schwarz-ct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_outputs(cfg, result, cfg.output_dir)
    for check in result.checks:
        print(check.line())
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
