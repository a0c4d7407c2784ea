"""Command-line runner.

    bsee-control solve <config> [--out DIR] [--seed S] [--mode M]
    bsee-control check <config> --suite NAME [...]
    bsee-control sweep <config> --levels a,b,c [--parameter steps|mesh]
    bsee-control list

``<config>`` is a YAML file or the name of a shipped config. Exit codes:
0 pass, 2 config error, 3 solver non-convergence, 4 check failure.
"""

import argparse
import os
import sys

from . import config as _config
from .config import SUITES, ConfigError
from .experiment import (EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, convergence_sweep,
                         run, write_outputs, write_sweep)


def _parser():
    p = argparse.ArgumentParser(prog="bsee-control", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="YAML config path or shipped config name")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--mode", choices=("deterministic", "tree"), default=None,
                        help="override the lattice mode")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve and run the configured checks")
    chk = sub.add_parser("check", parents=[common], help="run one check suite")
    chk.add_argument("--suite", required=True, choices=SUITES)
    sw = sub.add_parser("sweep", parents=[common], help="convergence sweep over refinement levels")
    sw.add_argument("--levels", default=None, help="comma-separated N or meshN values")
    sw.add_argument("--parameter", choices=("steps", "mesh"), default=None)
    sub.add_parser("list", help="list shipped configs")
    return p


def _print_checks(report, stream):
    for c in report.get("checks", []):
        flag = "PASS" if c["passed"] else "FAIL"
        margin = "n/a" if c["margin"] is None else f"{c['margin']:.3e}"
        stream.write(f"  {flag}  {c['name']:<28} margin={margin}  {c['detail']}\n")
        if not c["passed"] and c["witness"]:
            stream.write(f"        witness: {c['witness']}\n")


def _levels(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--levels must be comma-separated integers, got {text!r}") from None


def main(argv=None, stream=None):
    stream = stream or sys.stdout
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name in _config.shipped_configs():
            stream.write(name + "\n")
        return EXIT_OK
    try:
        cfg = _config.load(args.config)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG

    if args.command == "sweep":
        cfg = cfg.with_overrides(mode=args.mode, seed=args.seed)
        try:
            rows, err = convergence_sweep(cfg, _levels(args.levels) if args.levels else None, args.parameter)
        except ConfigError as exc:
            sys.stderr.write(f"config error: {exc}\n")
            return EXIT_CONFIG
        os.makedirs(args.out, exist_ok=True)
        write_sweep(rows, os.path.join(args.out, "sweep.csv"))
        stream.write(f"{'level':>8} {'error':>14} {'order':>8}\n")
        for r in rows:
            stream.write(f"{r.level:>8d} {r.error:>14.6e} {r.order:>8.3f}\n")
        if err:
            sys.stderr.write(f"sweep aborted: {err}\n")
            return EXIT_SOLVER
        want = cfg.sweep.get("expected_order")
        if want is not None:
            tol = float(cfg.sweep.get("order_tolerance", 0.3))
            bad = [r for r in rows[1:] if abs(r.order - float(want)) > tol]
            if bad:
                stream.write(f"order outside {want} +- {tol} at level(s) {[r.level for r in bad]}\n")
                return EXIT_CHECK
        return EXIT_OK

    suites = [args.suite] if args.command == "check" else None
    outcome = run(cfg, suites=suites, mode=args.mode, seed=args.seed)
    write_outputs(outcome, args.out)
    rep = outcome.report
    stream.write(f"{cfg.name}: {rep['status']} (exit {outcome.exit_code})\n")
    if "error" in rep:
        stream.write(f"  {rep['error']}\n")
    summ = rep.get("summary", {})
    if "cost" in summ:
        stream.write(f"  J = {summ['cost']['total']:.10g}   y(0)[0] = {summ['y0'][0]:.10g}\n")
    _print_checks(rep, stream)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
