"""Batch command-line front end.

Commands: fit, region, diagnose-bounds, coverage, quantiles, example1.
Tabular results go to CSV, structured reports to JSON; coverage and quantile
runs also render a figure next to the CSV unless --no-plot is given.
Exit codes: 0 success, 1 numeric failure (structured JSON error report),
2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bounds, estimation, regions, simulation
from .inference import StatisticKind
from .model import load_design


def _thread_cap(n: int | None):
    """Cap BLAS worker threads; results are identical for any cap."""
    if n is None:
        n = int(os.environ.get("LMMSCORE_THREADS", "0")) or None
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    except ImportError:
        return contextlib.nullcontext()


def _load_y(path: str) -> np.ndarray:
    """Single-column CSV of responses; an optional header row is skipped."""
    values = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if i == 0:
                    continue  # header
                raise ValueError(f"non-numeric value in {path} row {i + 1}")
    if not values:
        raise ValueError(f"no data rows in {path}")
    return np.array(values)


def _write_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _parse_floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _parse_ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _parse_stats(text: str) -> list:
    return [StatisticKind.parse(tok.strip()) for tok in text.split(",")]


def _fit_options(args) -> estimation.FitOptions:
    return estimation.FitOptions(max_iter=args.max_iter, tol=args.tol,
                                 starts=args.starts)


def _batch_fit_options(args) -> simulation.BatchFitOptions:
    return simulation.BatchFitOptions(max_iter=args.max_iter, tol=args.tol,
                                      starts=args.starts)


def _add_fit_flags(parser) -> None:
    parser.add_argument("--max-iter", type=int, default=500)
    parser.add_argument("--tol", type=float, default=1e-8)
    parser.add_argument("--starts", type=int, default=3)


def _add_common(parser) -> None:
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (default: all cores)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, default=None)


# ---------------------------------------------------------------------------
# Scenario construction shared by coverage / quantiles
# ---------------------------------------------------------------------------


def _add_scenario_flags(parser) -> None:
    parser.add_argument("--scenario", required=True,
                        choices=["example1", "figure1", "clusters", "crossed"])
    parser.add_argument("--n", type=int, default=200, help="example1 sample size")
    parser.add_argument("--m", type=int, default=500, help="number of clusters")
    parser.add_argument("--cluster-size", type=int, default=3)
    parser.add_argument("--p", type=int, default=2, help="fixed-effect columns")
    parser.add_argument("--n1", type=int, default=None)
    parser.add_argument("--n2", type=int, default=None)
    parser.add_argument("--crossed", type=str, default=None,
                        help="crossed factor sizes as n1,n2")
    parser.add_argument("--psi", type=str, default=None,
                        help="generating psi (comma separated)")


def _scenario_from_args(args) -> simulation.Scenario:
    psi = _parse_floats(args.psi) if args.psi else None
    if args.scenario == "example1":
        return simulation.Scenario.example1(
            n=args.n, psi=psi[0] if psi else 1.0, seed=args.seed)
    if args.scenario == "figure1":
        return simulation.Scenario.figure1_cluster(
            seed=args.seed, m=args.m if args.m != 500 else 50,
            cluster_size=args.cluster_size if args.cluster_size != 3 else 5)
    if args.scenario == "clusters":
        kwargs = dict(m=args.m, cluster_size=args.cluster_size, p=args.p,
                      seed=args.seed)
        if psi:
            kwargs["psi"] = tuple(psi)
        return simulation.Scenario.correlated_clusters(**kwargs)
    sizes = _parse_ints(args.crossed) if args.crossed else [args.n1, args.n2]
    if len(sizes) != 2 or any(s is None for s in sizes):
        raise ValueError("crossed scenario needs --n1/--n2 or --crossed n1,n2")
    kwargs = dict(n1=sizes[0], n2=sizes[1], p=args.p, seed=args.seed)
    if psi:
        kwargs["psi"] = tuple(psi)
    return simulation.Scenario.crossed_intercepts(**kwargs)


def _figure_path(out: str) -> str:
    return str(Path(out).with_suffix(".png"))


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _cmd_fit(args) -> int:
    design = load_design(args.model)
    y = _load_y(args.data)
    options = _fit_options(args)
    if args.reml:
        result = estimation.fit_reml(design, y, options)
        loglik_kind = "restricted"
    else:
        result = estimation.fit_ml(design, y, options)
        loglik_kind = "profile"
    report = {
        "method": "reml" if args.reml else "ml",
        "psi_hat": result.theta_hat.psi.tolist(),
        "beta_hat": (result.theta_hat.beta.tolist()
                     if result.theta_hat.beta is not None else None),
        "loglik": result.loglik_at_hat,
        "loglik_kind": loglik_kind,
        "converged": bool(result.converged),
        "on_boundary": bool(result.on_boundary),
        "gradient_norm": result.gradient_norm,
        "iterations": result.iterations,
    }
    _write_json(report, args.out)
    return 0


def _cmd_region(args) -> int:
    design = load_design(args.model)
    y = _load_y(args.data)
    box = [tuple(map(float, pair.split(":"))) for pair in args.box.split(",")]
    res = _parse_ints(args.res)
    spec = regions.RegionSpec(alpha=args.alpha,
                              statistic=StatisticKind.parse(args.stat),
                              df=design.r)
    grid = regions.region_grid(design, y, box, res, spec)
    _write_json(grid.to_json_dict(), args.out)
    if args.csv:
        grid.write_csv(args.csv)
    return 0


def _cmd_diagnose_bounds(args) -> int:
    report: dict = {}
    if args.model:
        design = load_design(args.model)
        if not args.psi:
            raise ValueError("--psi is required with --model")
        psi = np.array(_parse_floats(args.psi))
        sup_a = bounds.sup_a_estimate(design, psi, samples=args.samples,
                                      seed=args.seed)
        report["sup_a_estimate"] = sup_a
        report["sup_a_density_bound"] = bounds.density_bound_from_a(sup_a)
        if args.v:
            v = np.array(_parse_floats(args.v))
            ab = bounds.a_ratio(design, psi, v)
            report["a_ratio"] = {"a": ab.a_value,
                                 "density_bound": ab.density_bound,
                                 "degenerate": ab.degenerate}
            report["separable_bound"] = bounds.separable_bound(design, psi, v)
    if args.crossed:
        sizes = _parse_ints(args.crossed)
        report["crossed_bound"] = bounds.crossed_bound(sizes)
        try:
            report["crossed_bound_restricted"] = bounds.crossed_bound(
                sizes, restricted=True)
        except ValueError as exc:
            report["crossed_bound_restricted"] = None
            report["crossed_bound_restricted_note"] = str(exc)
    if args.cluster_m:
        if not args.psi:
            raise ValueError("--psi is required with --cluster-m")
        psi = np.array(_parse_floats(args.psi))
        report["cluster_bound"] = bounds.cluster_bound(
            args.cluster_m, args.c2, psi, c3_override=args.c3)
    if not report:
        raise ValueError("nothing to diagnose: pass --model, --crossed, "
                         "or --cluster-m")
    _write_json(report, args.out)
    return 0


def _cmd_coverage(args) -> int:
    scenario = _scenario_from_args(args)
    probes = (_parse_floats(args.probes) if args.probes
              else scenario.default_probes())
    stats = _parse_stats(args.stat)
    table = simulation.coverage_experiment(
        scenario, probes, stats, reps=args.reps, alpha=args.alpha,
        fit_options=_batch_fit_options(args))
    out = args.out or "coverage.csv"
    table.write_csv(out)
    if not args.no_plot:
        from . import plotting
        plotting.coverage_figure(table, _figure_path(out), alpha=args.alpha)
    return 0


def _cmd_quantiles(args) -> int:
    scenario = _scenario_from_args(args)
    stats = _parse_stats(args.stat)
    probe = np.array(_parse_floats(args.probe)) if args.probe else None
    rows = simulation.quantile_curves(
        scenario, stats, reps=args.reps, probe_psi=probe,
        fit_options=_batch_fit_options(args))
    out = args.out or "quantiles.csv"
    simulation.write_quantile_csv(rows, out)
    if not args.no_plot:
        from . import plotting
        plotting.quantile_figure(rows, _figure_path(out))
    return 0


def _cmd_example1(args) -> int:
    result = simulation.proposition1_comparison(
        n=args.n, psi_scaled=args.psi_scaled, reps=args.reps, seed=args.seed)
    out = args.out or "example1.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        writer.writerow(["psi", result["psi"]])
        for name, ks in result["rows"]:
            writer.writerow([f"ks_{name}", f"{ks:.6f}"])
        writer.writerow(["boundary_frequency",
                         f"{result['boundary_frequency']:.6f}"])
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmmscore",
        description="Score-based inference for variance parameters of "
                    "Gaussian linear mixed models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="ML or REML fit from a model spec")
    p_fit.add_argument("--model", required=True, help="model-spec JSON")
    p_fit.add_argument("--data", required=True, help="single-column y CSV")
    p_fit.add_argument("--reml", action="store_true")
    _add_fit_flags(p_fit)
    _add_common(p_fit)
    p_fit.set_defaults(func=_cmd_fit)

    p_reg = sub.add_parser("region", help="confidence-region grid scan")
    p_reg.add_argument("--model", required=True)
    p_reg.add_argument("--data", required=True)
    p_reg.add_argument("--alpha", type=float, default=0.05)
    p_reg.add_argument("--stat", default="rscr")
    p_reg.add_argument("--box", required=True,
                       help="per-coordinate lo:hi pairs, comma separated")
    p_reg.add_argument("--res", required=True,
                       help="per-coordinate grid sizes, comma separated")
    p_reg.add_argument("--csv", default=None, help="also write the long CSV")
    _add_fit_flags(p_reg)
    _add_common(p_reg)
    p_reg.set_defaults(func=_cmd_region)

    p_db = sub.add_parser("diagnose-bounds",
                          help="normal-approximation bound report (JSON)")
    p_db.add_argument("--model", default=None)
    p_db.add_argument("--psi", default=None)
    p_db.add_argument("--v", default=None, help="direction for a_ratio")
    p_db.add_argument("--samples", type=int, default=500)
    p_db.add_argument("--crossed", default=None, help="factor sizes n1,n2,...")
    p_db.add_argument("--cluster-m", type=int, default=None)
    p_db.add_argument("--c2", type=float, default=3.0,
                      help="eigenvalue-ratio constant for the cluster bound")
    p_db.add_argument("--c3", type=float, default=None,
                      help="override c3 (default sqrt(2) c2, equal Z_i)")
    _add_common(p_db)
    p_db.set_defaults(func=_cmd_diagnose_bounds)

    p_cov = sub.add_parser("coverage", help="Monte Carlo coverage table")
    _add_scenario_flags(p_cov)
    p_cov.add_argument("--stat", default="rscr",
                       help="comma list of score,pscr,rscr,wald,lrt")
    p_cov.add_argument("--probes", default=None,
                       help="probe coordinates, comma separated")
    p_cov.add_argument("--reps", type=int,
                       default=simulation.DEFAULT_COVERAGE_REPS)
    p_cov.add_argument("--alpha", type=float, default=0.05)
    p_cov.add_argument("--no-plot", action="store_true")
    _add_fit_flags(p_cov)
    _add_common(p_cov)
    p_cov.set_defaults(func=_cmd_coverage)

    p_q = sub.add_parser("quantiles", help="empirical quantile curves")
    _add_scenario_flags(p_q)
    p_q.add_argument("--stat", default="score,wald,lrt")
    p_q.add_argument("--probe", default=None,
                     help="evaluate at this psi instead of the scenario truth")
    p_q.add_argument("--reps", type=int,
                     default=simulation.DEFAULT_QUANTILE_REPS)
    p_q.add_argument("--no-plot", action="store_true")
    _add_fit_flags(p_q)
    _add_common(p_q)
    p_q.set_defaults(func=_cmd_quantiles)

    p_e1 = sub.add_parser("example1",
                          help="local-alternative limit comparison table")
    p_e1.add_argument("--n", type=int, default=10000)
    p_e1.add_argument("--psi-scaled", type=float, default=1.0,
                      help="a in psi = a / sqrt(n)")
    p_e1.add_argument("--reps", type=int, default=10000)
    _add_common(p_e1)
    p_e1.set_defaults(func=_cmd_example1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap(args.threads if hasattr(args, "threads") else None):
            return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        report = {"error": type(exc).__name__, "message": str(exc)}
        out = getattr(args, "out", None)
        if out:
            Path(out).with_suffix(".error.json").write_text(
                json.dumps(report, indent=2) + "\n")
        print(json.dumps(report), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
