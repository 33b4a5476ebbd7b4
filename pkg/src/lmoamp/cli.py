"""Command-line entry point: ``lmoamp {run,se,fp,selftest}``."""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .config import ConfigError, load_config
from .harness import HarnessIOError, run_experiment
from .prior import BgPrior
from .state_evolution import (GeometricSpectrum, SeError, fixed_point, se_bayes,
                              se_bayes_step, se_damped_oamp)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmoamp", description="LM-OAMP experiments and state evolution")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="Monte Carlo experiment from a config file")
    r.add_argument("config", help="INI file with an [experiment] section")
    r.add_argument("--seed", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--out", help="CSV output path (overrides output_path)")
    r.add_argument("--workers", type=int, help="worker processes (default: $LMOAMP_WORKERS or CPU count)")

    def model_args(q):
        q.add_argument("--delta", type=float, default=0.5)
        q.add_argument("--kappa", type=float, default=1e3)
        q.add_argument("--rho", type=float, default=0.1)
        q.add_argument("--snr", type=float, default=40.0, help="SNR in dB")

    s = sub.add_parser("se", help="state-evolution trajectory as CSV")
    model_args(s)
    s.add_argument("--iters", type=int, default=30)
    s.add_argument("--theta-a", type=float, default=1.0)
    s.add_argument("--theta-b", type=float, default=1.0,
                   help="values below 1 select the damped-OAMP recursions")
    s.add_argument("--out", help="write CSV here instead of stdout")

    f = sub.add_parser("fp", help="fixed point of the Bayes-optimal state evolution")
    model_args(f)
    f.add_argument("--tol", type=float, default=1e-12)
    f.add_argument("--max-iter", type=int, default=10_000)

    t = sub.add_parser("selftest", help="fast property checks")
    t.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args, parser) -> int:
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, trials=args.trials,
                                                       output_path=args.out)
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmoamp: error: config file not found: {exc.filename}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(cfg, workers=args.workers)
    except HarnessIOError as exc:
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 1
    for variant in cfg.variants:
        label = variant.label
        print(f"{label}: max gap {report.max_gap(label):.3f} dB, "
              f"excluded trials {report.excluded.get(label, 0)}")
    print(f"wrote {cfg.output_path}")
    return 0


def _model(args):
    if not 0.0 < args.delta <= 1.0 or args.kappa < 1.0 or not 0.0 < args.rho <= 1.0:
        raise ValueError("need 0 < delta <= 1, kappa >= 1, 0 < rho <= 1")
    return GeometricSpectrum(args.delta, args.kappa), 10.0 ** (-args.snr / 10.0), BgPrior(args.rho)


def _cmd_se(args, parser) -> int:
    try:
        spectrum, sigma2, prior = _model(args)
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 2
    if args.iters < 1:
        parser.print_usage(sys.stderr)
        print("lmoamp: error: --iters must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.theta_a == 1.0 and args.theta_b == 1.0:
            traj = se_bayes(args.iters, spectrum, sigma2, prior)
        else:
            traj = se_damped_oamp(args.theta_a, args.theta_b, args.iters, spectrum, sigma2, prior)
    except (SeError, ValueError) as exc:
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 1
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iteration", "v_BA", "v_AB", "xi_A", "xi_B", "mse", "mse_db"])
        arr = traj.as_arrays()
        for t in range(len(traj)):
            w.writerow([t] + [f"{arr[k][t]:.12e}" for k in ("v_BA", "v_AB", "xi_A", "xi_B", "mse")]
                       + [f"{10 * np.log10(arr['mse'][t]):.6f}"])
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_fp(args, parser) -> int:
    try:
        spectrum, sigma2, prior = _model(args)
        fp = fixed_point(lambda v: se_bayes_step(v, spectrum, sigma2, prior),
                         tol=args.tol, max_iter=args.max_iter)
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 2
    except SeError as exc:
        print(f"lmoamp: error: {exc}", file=sys.stderr)
        return 1
    print(f"v_AB = {fp.v_AB:.12e}")
    print(f"v_BA = {fp.v_BA:.12e}")
    print(f"mse = {fp.mse:.12e}")
    print(f"mse_db = {10 * np.log10(fp.mse):.6f}")
    print(f"iterations = {fp.iterations}")
    print(f"converged = {fp.converged}")
    return 0 if fp.converged else 1


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "se":
        return _cmd_se(args, parser)
    if args.command == "fp":
        return _cmd_fp(args, parser)
    from .selftest import run_selftest
    return 0 if run_selftest(args.seed) else 1


if __name__ == "__main__":
    sys.exit(main())
