"""Confidence regions by test inversion against chi-squared critical values.

C(alpha) = {psi in P: T(psi) <= c_{df, 1-alpha}} with a FIXED critical value
for all psi, boundary points included.  The grid scan marks lattice points
outside P as infeasible without evaluating them; feasible boundary points are
evaluated (the score statistic is well-defined there).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import estimation, inference, reml
from .inference import StatisticKind
from .model import LmmDesign, Parameter, check_parameter


@dataclass(frozen=True)
class RegionSpec:
    alpha: float
    statistic: StatisticKind
    df: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.df < 1:
            raise ValueError("df must be >= 1")


def chi2_quantile(df: int, prob: float, tol: float = 1e-10) -> float:
    """Inverse chi-squared CDF by bisection on the regularized lower
    incomplete gamma function, to absolute tolerance tol."""
    if df < 1:
        raise ValueError("df must be a positive integer")
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must be in (0, 1)")

    def cdf(x):
        return special.gammainc(df / 2.0, x / 2.0)

    lo, hi = 0.0, max(8.0 * df, 16.0)
    while cdf(hi) < prob:
        hi *= 2.0
        if hi > 1e12:
            break
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def evaluate_statistic(design: LmmDesign, y, psi, kind: StatisticKind,
                       fit: estimation.FitResult | None = None) -> float:
    """T(psi) for any supported statistic kind on raw (design, y).

    Wald and likelihood-ratio need a fitted maximizer; pass a precomputed
    ``fit`` to reuse it across psi probes (one fit per dataset).
    """
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if kind is StatisticKind.Score:
        theta = Parameter(psi=psi)
        _, t = inference.score_statistic(design, y, theta)
        return t
    if kind is StatisticKind.ProfileScore:
        if design.p == 0:
            _, t = inference.score_statistic(design, y, Parameter(psi=psi))
            return t
        return inference.profile_score_statistic(design, y, psi)
    if kind is StatisticKind.RestrictedScore:
        _, t = reml.restricted_score_statistic(design, y, psi)
        return t
    if kind is StatisticKind.Wald:
        fit = fit or _fit_for(design, y)
        reduced, _ = reml.reml_reduce(design, y)
        info = inference.fisher_information(reduced, fit.theta_hat.psi).info_psi
        return inference.wald_statistic(psi, fit.theta_hat.psi, info)
    if kind is StatisticKind.LikelihoodRatio:
        fit = fit or _fit_for(design, y)
        reduced, y_red = reml.reml_reduce(design, y)
        return inference.lrt_statistic(reduced, y_red, psi,
                                       Parameter(psi=fit.theta_hat.psi))
    raise ValueError(f"unsupported statistic {kind}")


def _fit_for(design: LmmDesign, y) -> estimation.FitResult:
    """REML when there are fixed effects, plain ML otherwise."""
    if design.p > 0:
        return estimation.fit_reml(design, y)
    return estimation.fit_ml(design, y)


def region_membership(design: LmmDesign, y, psi, spec: RegionSpec,
                      fit: estimation.FitResult | None = None) -> bool:
    """psi in C(alpha) iff T(psi) <= c_{df, 1 - alpha}."""
    value = evaluate_statistic(design, y, psi, spec.statistic, fit=fit)
    return bool(value <= chi2_quantile(spec.df, 1.0 - spec.alpha))


@dataclass
class RegionGrid:
    """Membership mask over a box lattice plus per-point statistic values."""

    box: list
    resolution: list
    spec: RegionSpec
    grid: np.ndarray          # (npoints, r) lattice coordinates
    member: np.ndarray        # bool, False where infeasible
    feasible: np.ndarray      # bool
    statistic: np.ndarray     # float, NaN where infeasible
    critical_value: float

    def to_json_dict(self) -> dict:
        return {
            "box": [list(b) for b in self.box],
            "resolution": list(self.resolution),
            "alpha": self.spec.alpha,
            "statistic": self.spec.statistic.value,
            "df": self.spec.df,
            "critical_value": self.critical_value,
            "member": self.member.astype(int).tolist(),
            "feasible": self.feasible.astype(int).tolist(),
        }

    def write_csv(self, path) -> None:
        r = self.grid.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"psi{k + 1}" for k in range(r)]
                            + ["statistic", "feasible", "member"])
            for row, val, feas, mem in zip(self.grid, self.statistic,
                                           self.feasible, self.member):
                writer.writerow(list(row) + [val, int(feas), int(mem)])


def region_grid(design: LmmDesign, y, box, resolution, spec: RegionSpec) -> RegionGrid:
    """Scan the lattice over ``box`` (per-coordinate [lo, hi]) at the given
    per-coordinate resolutions.  Grid points outside P are flagged infeasible
    and not evaluated; feasible boundary points are evaluated."""
    box = [tuple(map(float, b)) for b in box]
    resolution = [int(k) for k in resolution]
    r = design.r
    if len(box) != r or len(resolution) != r:
        raise ValueError(f"box and resolution must have {r} coordinates")
    axes = [np.linspace(lo, hi, k) for (lo, hi), k in zip(box, resolution)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    npoints = grid.shape[0]
    feasible = np.zeros(npoints, dtype=bool)
    member = np.zeros(npoints, dtype=bool)
    statistic = np.full(npoints, np.nan)
    crit = chi2_quantile(spec.df, 1.0 - spec.alpha)
    fit = None
    if spec.statistic in (StatisticKind.Wald, StatisticKind.LikelihoodRatio):
        fit = _fit_for(design, y)
    for idx in range(npoints):
        psi = grid[idx]
        if check_parameter(design.structure, psi) == "outside":
            continue
        feasible[idx] = True
        value = evaluate_statistic(design, y, psi, spec.statistic, fit=fit)
        statistic[idx] = value
        member[idx] = value <= crit
    return RegionGrid(box=box, resolution=resolution, spec=spec, grid=grid,
                      member=member, feasible=feasible, statistic=statistic,
                      critical_value=crit)
