"""Pipeline orchestration and command line interface.

``analyze`` runs the full chain (fundamental pair, left-end check,
threshold maximization, condition checks, free-boundary solutions with
second-order labels, optimality certificates, optional Monte Carlo
cross-checks) and emits one JSON report.  ``plot-data`` exports CSV
tables; ``mc`` runs a single Monte Carlo estimate.

Exit codes: 0 success, 2 spec validation error, 3 numerical failure (the
report is still emitted with partial results and caveats).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffusion import (NumericalFailureError, ShootingFailureError,
                        UnsupportedConfigurationError, fundamental_pair,
                        left_end_condition)
from .expr import FormulaError
from .freeboundary import (certify_optimality, monotone_tail_check, solve_fb)
from .mc import McConfig, simulate_threshold_value, sweep_thresholds
from .report import SCHEMA_VERSION, dumps_report, write_csv
from .specfile import ProblemSpec, SpecValidationError, load_problem
from .threshold import (build_threshold_function, check_threshold_optimality, maximize_h,
                        smooth_pasting_check, value_threshold)

GRID_ENV_VAR = "THRESHOLD_STOP_GRID_POINTS"


def examples_dir() -> Path:
    """Directory with the bundled example problem specs."""
    return Path(__file__).parent / "examples"


def _grid_points(prob: ProblemSpec, override):
    if override is not None:
        return int(override)
    if prob.grid_points is not None:
        return prob.grid_points
    env = os.environ.get(GRID_ENV_VAR)
    if env:
        return int(env)
    return 2001


def run_analyze(spec_path, grid_points=None, seed=None, with_mc=True):
    """Full analysis of one problem spec.

    Returns (report_dict, exit_code).  Numerical failures produce a
    partial report and exit code 3.
    """
    prob = load_problem(spec_path)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "input": prob.echo,
        "caveats": [],
    }
    caveats = report["caveats"]
    try:
        return _analyze(prob, report, caveats, grid_points, seed, with_mc), 0
    except (NumericalFailureError, ShootingFailureError,
            UnsupportedConfigurationError) as e:
        report["error"] = {"type": type(e).__name__, "message": str(e)}
        caveats.append("analysis incomplete: numerical failure")
        return report, 3


def _analyze(prob, report, caveats, grid_points, seed, with_mc):
    d, g, rho = prob.diffusion, prob.payoff, prob.rho
    n_points = _grid_points(prob, grid_points)

    fp = fundamental_pair(d, rho, x_ref=prob.x_ref)
    diag = fp.diagnostics(d)
    report["fundamental_pair"] = {
        "representation": fp.representation,
        "rho": rho,
        "x_ref": fp.x_ref,
        "exponents": list(fp.exponents),
        "diagnostics": diag,
        "residual_tolerance": 1e-6,
    }

    left = left_end_condition(d, fp, g)
    report["left_end_verdict"] = {"verdict": left, "tolerance": 1e-8}
    if left != "holds":
        caveats.append("left-end condition not established; the one-sided "
                       "threshold value representation does not apply and the "
                       "threshold analysis was skipped")
        return report

    tf = build_threshold_function(d, fp, g, n_points=n_points, left_end=left)
    mx = maximize_h(tf)
    ta = {
        "status": mx.status,
        "p_star": mx.p_star,
        "h_at_p_star": mx.h_value,
        "limit_estimate": mx.limit_estimate,
        "unbounded": mx.unbounded,
        "truncation_radius": mx.truncation_radius,
        "grid_points": len(tf.grid),
        "h_grid_max": float(np.max(tf.h(tf.grid))),
    }
    ta["side"] = mx.side
    if mx.status == "sup_at_boundary":
        if mx.side == "left":
            ta["note"] = ("no optimal threshold stopping time exists: the "
                          "payoff-to-psi ratio grows as the threshold "
                          "approaches the left endpoint")
        elif mx.unbounded:
            ta["note"] = ("no optimal threshold stopping time exists: the "
                          "threshold value grows without bound as the "
                          "threshold increases")
        else:
            ta["note"] = ("no optimal threshold stopping time exists: the "
                          "value approaches its supremum only as the "
                          "threshold goes to the right endpoint")
        caveats.append(f"threshold search truncated at {mx.truncation_radius:g}")
    report["threshold_analysis"] = ta

    if mx.status == "attained_interior":
        opt = check_threshold_optimality(tf, mx.p_star)
        ta["class_optimality"] = {"weak": opt.weak.as_dict(),
                                  "strict": opt.strict.as_dict()}
        pasting = smooth_pasting_check(fp, g, mx.p_star)
        ta["smooth_pasting"] = {
            "status": pasting.status,
            "value_slope": pasting.value_slope,
            "payoff_slope_left": pasting.payoff_slope_left,
            "payoff_slope_right": pasting.payoff_slope_right,
            "tolerance": pasting.tolerance,
        }
        if opt.strict.passed:
            ta["continuation_set"] = {"kind": "semi_interval",
                                      "lower": fp.lower, "upper": mx.p_star}
        else:
            ta["continuation_set"] = {"kind": "not_semi_interval",
                                      "witness": opt.strict.witness}

    solutions = solve_fb(tf)
    fb_list = []
    for sol in solutions:
        entry = sol.as_dict()
        entry["classification_tolerance"] = 1e-9
        cert = certify_optimality(tf, d, rho, sol.p_star)
        entry["certificate"] = cert.as_dict()
        if cert.core_passed():
            tail = monotone_tail_check(tf, sol.p_star)
            entry["monotone_tail"] = {"status": tail.status,
                                      "witness": tail.witness}
        fb_list.append(entry)
    report["fb_solutions"] = fb_list

    if prob.x_query:
        p_star = mx.p_star if mx.status == "attained_interior" else None
        report["values"] = [
            {"x": float(x), "value": tf.value_at(x, p_star=p_star),
             "payoff": float(g.value(x))}
            for x in prob.x_query
        ]

    if with_mc and prob.mc is not None and mx.status == "attained_interior":
        cfg = prob.mc if seed is None else McConfig(
            n_paths=prob.mc.n_paths, dt=prob.mc.dt, t_max=prob.mc.t_max,
            seed=int(seed), antithetic=prob.mc.antithetic,
            n_workers=prob.mc.n_workers)
        checks = []
        for x in prob.x_query:
            if x >= mx.p_star:
                continue
            est = simulate_threshold_value(d, g, rho, float(x), mx.p_star, cfg)
            analytic = value_threshold(fp, g, float(x), mx.p_star, left_end=left)
            checks.append({
                "x0": float(x), "p": mx.p_star,
                "mc_mean": est.mean, "mc_std_error": est.std_error,
                "n_stopped": est.n_stopped, "n_truncated": est.n_truncated,
                "analytic": analytic,
                "abs_difference": abs(est.mean - analytic),
                "within_3_std_errors": bool(abs(est.mean - analytic)
                                            <= 3.0 * est.std_error),
            })
        report["mc_crosschecks"] = checks

    return report


def run_plotdata(spec_path, what, out_path, grid_points=None, seed=None):
    """Export one CSV table; returns the path written."""
    prob = load_problem(spec_path)
    d, g, rho = prob.diffusion, prob.payoff, prob.rho
    n_points = _grid_points(prob, grid_points)
    fp = fundamental_pair(d, rho, x_ref=prob.x_ref)
    left = left_end_condition(d, fp, g)
    tf = build_threshold_function(d, fp, g, n_points=n_points, left_end=left)

    if what == "h":
        write_csv(out_path, ["p", "h", "h1", "h2"], tf.h_table())
    elif what == "value":
        v = tf.value_curve()
        rows = np.column_stack([tf.grid, v, np.asarray(g.value(tf.grid))])
        write_csv(out_path, ["x", "value", "payoff"], rows)
    elif what == "psi":
        write_csv(out_path, ["x", "psi", "psi1", "psi2", "phi", "phi1", "phi2"],
                  fp.table(tf.grid))
    elif what == "mc_sweep":
        if prob.mc is None:
            raise SpecValidationError("mc.*: plot-data mc_sweep needs an mc block")
        if left != "holds":
            raise SpecValidationError("left-end condition does not hold")
        mx = maximize_h(tf)
        if mx.status != "attained_interior":
            raise NumericalFailureError("mc_sweep needs an attained threshold")
        cfg = prob.mc if seed is None else McConfig(
            n_paths=prob.mc.n_paths, dt=prob.mc.dt, t_max=prob.mc.t_max,
            seed=int(seed), antithetic=prob.mc.antithetic,
            n_workers=prob.mc.n_workers)
        x0 = next((float(x) for x in prob.x_query if x < mx.p_star), None)
        if x0 is None:
            raise SpecValidationError(
                "analysis.x_query: mc_sweep needs a query point below the threshold")
        p_hi = min(2.0 * mx.p_star, tf.grid[-1])
        p_list = np.linspace(0.5 * mx.p_star, p_hi, 21)
        rows = [(p, est.mean, est.std_error, est.n_stopped, est.n_truncated)
                for p, est in sweep_thresholds(d, g, rho, x0, p_list, cfg)]
        write_csv(out_path, ["p", "mean", "std_error", "n_stopped", "n_truncated"],
                  rows)
    else:
        raise SpecValidationError(f"unknown plot-data kind {what!r}")
    return out_path


def run_mc(spec_path, x0, p, seed=None):
    """One Monte Carlo estimate using the spec's mc block."""
    prob = load_problem(spec_path)
    if prob.mc is None:
        raise SpecValidationError("mc.*: the spec has no mc block")
    cfg = prob.mc if seed is None else McConfig(
        n_paths=prob.mc.n_paths, dt=prob.mc.dt, t_max=prob.mc.t_max,
        seed=int(seed), antithetic=prob.mc.antithetic, n_workers=prob.mc.n_workers)
    est = simulate_threshold_value(prob.diffusion, prob.payoff, prob.rho,
                                   float(x0), float(p), cfg)
    return {
        "x0": float(x0), "p": float(p), "mean": est.mean,
        "std_error": est.std_error, "n_stopped": est.n_stopped,
        "n_truncated": est.n_truncated,
        "config": {"n_paths": cfg.n_paths, "dt": cfg.dt, "t_max": cfg.t_max,
                   "seed": cfg.seed, "antithetic": cfg.antithetic,
                   "n_workers": cfg.n_workers},
    }


def _emit(report, report_path):
    text = dumps_report(report)
    if report_path:
        Path(report_path).write_text(text + "\n")
    else:
        print(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="threshold-stop",
        description="Threshold rules for optimal stopping of one-dimensional "
                    "diffusions: analysis, free-boundary solutions, "
                    "certificates, Monte Carlo validation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="run the full analysis pipeline")
    pa.add_argument("spec")
    pa.add_argument("--report", help="write the JSON report here (default stdout)")
    pa.add_argument("--seed", type=int, help="override the mc block's seed")
    pa.add_argument("--grid-points", type=int, dest="grid_points")

    pp = sub.add_parser("plot-data", help="export CSV plot data")
    pp.add_argument("spec")
    pp.add_argument("--what", required=True,
                    choices=["h", "value", "psi", "mc_sweep"])
    pp.add_argument("--out", required=True)
    pp.add_argument("--report", help="also write a small JSON status report")
    pp.add_argument("--seed", type=int)
    pp.add_argument("--grid-points", type=int, dest="grid_points")

    pm = sub.add_parser("mc", help="Monte Carlo estimate at one (x0, p)")
    pm.add_argument("spec")
    pm.add_argument("--x", type=float, required=True, dest="x0")
    pm.add_argument("--p", type=float, required=True)
    pm.add_argument("--report", help="write the JSON result here (default stdout)")
    pm.add_argument("--seed", type=int)

    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            report, code = run_analyze(args.spec, grid_points=args.grid_points,
                                       seed=args.seed)
            _emit(report, args.report)
            return code
        if args.command == "plot-data":
            out = run_plotdata(args.spec, args.what, args.out,
                               grid_points=args.grid_points, seed=args.seed)
            status = {"schema_version": SCHEMA_VERSION, "written": str(out),
                      "what": args.what}
            if args.report:
                _emit(status, args.report)
            return 0
        if args.command == "mc":
            result = run_mc(args.spec, args.x0, args.p, seed=args.seed)
            _emit(result, args.report)
            return 0
    except (SpecValidationError, FormulaError) as e:
        print(f"spec error: {e}", file=sys.stderr)
        return 2
    except (NumericalFailureError, ShootingFailureError,
            UnsupportedConfigurationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
