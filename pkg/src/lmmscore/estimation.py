"""Constrained ML and REML fitting, plus the single-variance closed forms.

The parameter set is P = {psi: Psi(psi) >= 0, psi_r > 0}.  Fitting maximizes
the log-likelihood (beta profiled out in closed form via GLS at every psi)
with a projected quasi-Newton iteration: Barzilai-Borwein steps with Armijo
backtracking, projected onto P by eigenvalue clipping of Psi and a floor on
psi_r.  Boundary solutions are expected behavior and are returned with
``on_boundary`` set, never as errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import inference, reml
from .model import (
    LmmDesign,
    Parameter,
    SingularCovarianceError,
    build_psi,
    check_parameter,
)


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    tol: float = 1e-8
    starts: int = 3
    psi_r_floor_factor: float = 1e-10
    boundary_tol: float = 1e-8


@dataclass
class FitResult:
    theta_hat: Parameter
    loglik_at_hat: float
    converged: bool
    on_boundary: bool
    gradient_norm: float
    iterations: int


# ---------------------------------------------------------------------------
# Feasible-set projection
# ---------------------------------------------------------------------------


def project_psi(structure, psi: np.ndarray, psi_r_floor: float) -> np.ndarray:
    """Project psi onto {Psi >= 0, psi_r >= floor}.

    Diagonal structures reduce to box clipping; otherwise Psi is assembled,
    its eigenvalues clipped at zero, and the parameters re-extracted by
    averaging over each indicator's support (exact for the structures here,
    whose clipped Psi stays within the parameterized family).
    """
    out = np.array(psi, dtype=float)
    out[-1] = max(out[-1], psi_r_floor)
    if structure.r == 1 or structure.q == 0:
        return out
    assignment = structure.assignment
    diag_only = np.all(assignment[~np.eye(structure.q, dtype=bool)] == 0)
    if diag_only:
        out[:-1] = np.maximum(out[:-1], 0.0)
        return out
    psi_mat = build_psi(structure, out)
    lam, vec = np.linalg.eigh(psi_mat)
    if lam[0] >= 0:
        return out
    clipped = (vec * np.maximum(lam, 0.0)) @ vec.T
    for j in range(1, structure.r):
        mask = assignment == j
        out[j - 1] = float(clipped[mask].mean())
    return out


# ---------------------------------------------------------------------------
# Projected quasi-Newton ascent
# ---------------------------------------------------------------------------


def projected_ascent(value_and_grad, x0: np.ndarray, project, tol: float,
                     max_iter: int) -> tuple[np.ndarray, float, np.ndarray, bool, int]:
    """Maximize f via projected gradient with BB steps and Armijo backtracking.

    Returns (x, f(x), projected gradient, converged, iterations).  The
    convergence test is on the projected gradient: the step
    proj(x + g) - x vanishes exactly at KKT points of the constrained
    problem, so boundary maximizers are detected without special casing.
    """
    x = project(np.asarray(x0, dtype=float))
    f, g = value_and_grad(x)
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    prev_x = prev_g = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        pg = project(x + g) - x
        if np.linalg.norm(pg) <= tol * max(1.0, abs(f)):
            return x, f, pg, True, iterations
        if prev_x is not None:
            s = x - prev_x
            dg = prev_g - g  # gradient of -f increases along s
            denom = float(s @ dg)
            if denom > 1e-300:
                step = float(s @ s) / denom
            step = min(max(step, 1e-12), 1e12)
        alpha = step
        accepted = False
        for _ in range(60):
            cand = project(x + alpha * g)
            try:
                f_cand, g_cand = value_and_grad(cand)
            except SingularCovarianceError:
                alpha *= 0.5
                continue
            direction = cand - x
            if f_cand >= f + 1e-4 * float(g @ direction) and np.isfinite(f_cand):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            pg = project(x + g) - x
            return x, f, pg, np.linalg.norm(pg) <= tol * max(1.0, abs(f)), iterations
        prev_x, prev_g = x, g
        x, f, g = cand, f_cand, g_cand
    pg = project(x + g) - x
    return x, f, pg, False, iterations


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def _profiled_objective(design: LmmDesign, y):
    """Profiled log-likelihood ell(beta~(psi), psi) and its psi-gradient.

    By the envelope theorem the gradient of the profiled objective is the
    partial score S(psi; beta~).
    """
    def value_and_grad(psi):
        if design.p > 0:
            beta = inference.gls_beta(design, y, psi)
            theta = Parameter(psi=psi, beta=beta)
        else:
            theta = Parameter(psi=psi)
        f = inference.log_likelihood(design, y, theta)
        g = inference.score(design, y, theta).score_psi
        return f, g

    return value_and_grad


def _default_starts(design: LmmDesign, y, floor: float) -> list[np.ndarray]:
    """Moment-based, identity-scaled, and near-zero starting points."""
    y = np.asarray(y, dtype=float).ravel()
    if design.p > 0:
        coef, *_ = np.linalg.lstsq(design.X, y, rcond=None)
        resid = y - design.X @ coef
    else:
        resid = y
    s2 = max(float(resid @ resid) / max(design.n, 1), 10 * floor)
    structure = design.structure
    diag_param = np.zeros(structure.r - 1, dtype=bool)
    diag_cells = np.diag(structure.assignment)
    for j in range(1, structure.r):
        diag_param[j - 1] = bool(np.any(diag_cells == j))
    starts = []
    for diag_scale, err_scale in ((0.5, 0.5), (1.0, 1.0), (1e-4, 1.0)):
        psi = np.zeros(structure.r)
        psi[:-1] = np.where(diag_param, diag_scale * s2, 0.0)
        psi[-1] = err_scale * s2
        starts.append(psi)
    return starts


def _fit(design: LmmDesign, y, options: FitOptions, with_beta: bool) -> FitResult:
    y = np.asarray(y, dtype=float).ravel()
    s2 = float(np.var(y)) if y.size > 1 else float(y[0] ** 2) + 1.0
    floor = options.psi_r_floor_factor * max(s2, 1e-12)
    structure = design.structure
    project = lambda psi: project_psi(structure, psi, floor)
    objective = _profiled_objective(design, y)
    starts = _default_starts(design, y, floor)[: max(options.starts, 1)]
    while len(starts) < options.starts:
        starts.append(starts[-1])

    best = None
    for psi0 in starts:
        x, f, pg, converged, iterations = projected_ascent(
            objective, psi0, project, options.tol, options.max_iter)
        if best is None or f > best[1] + 1e-12:
            best = (x, f, pg, converged, iterations)
    best = _polish_singular_vech_block(structure, objective, project,
                                       options, best)
    psi_hat, f_hat, pg, converged, iterations = best
    beta_hat = inference.gls_beta(design, y, psi_hat) if (with_beta and design.p > 0) else None
    status = check_parameter(structure, psi_hat, tol=options.boundary_tol)
    on_boundary = status == "boundary" or psi_hat[-1] <= floor * (1 + 1e-9)
    return FitResult(
        theta_hat=Parameter(psi=psi_hat, beta=beta_hat),
        loglik_at_hat=f_hat,
        converged=converged,
        on_boundary=on_boundary,
        gradient_norm=float(np.linalg.norm(pg)),
        iterations=iterations,
    )


def _is_vech_2x2(structure) -> bool:
    """True when Psi is I_{q/2} (x) a full symmetric 2x2 block."""
    if structure.r != 4 or structure.q == 0 or structure.q % 2:
        return False
    block = np.array([[1, 2], [2, 3]])
    expected = np.kron(np.eye(structure.q // 2, dtype=int), block)
    # kron zeroes the off-block cells, matching unparameterized entries
    return bool(np.array_equal(structure.assignment, expected))


def _polish_singular_vech_block(structure, objective, project, options, best):
    """Refine a fit whose 2x2 covariance block came out (near) singular.

    Gradient projection crawls along the curved rank-one face of the PSD
    cone and can stop short of the constrained maximum.  On that face the
    block is v v', smooth in v, so reoptimizing t = (v1, v2, psi_r) there
    converges normally.  The polished point is kept only if it improves the
    objective; the reported gradient is the full-space projected gradient.
    """
    if not _is_vech_2x2(structure):
        return best
    x, f = best[0], best[1]
    det = x[0] * x[2] - x[1] ** 2
    if det > 1e-6 * max(x[0] * x[2], 1e-12):
        return best

    def to_psi(t):
        return np.array([t[0] ** 2, t[0] * t[1], t[1] ** 2, t[2]])

    def objective_t(t):
        f_val, g_psi = objective(to_psi(t))
        g_t = np.array([2 * t[0] * g_psi[0] + t[1] * g_psi[1],
                        t[0] * g_psi[1] + 2 * t[1] * g_psi[2],
                        g_psi[3]])
        return f_val, g_t

    def project_t(t):
        out = np.array(t, dtype=float)
        out[2] = project(to_psi(t))[3]
        return out

    t0 = np.array([math.sqrt(max(x[0], 0.0)),
                   math.copysign(math.sqrt(max(x[2], 0.0)), x[1] if x[1] else 1.0),
                   x[3]])
    t_hat, f_hat, _, _, extra_iters = projected_ascent(
        objective_t, t0, project_t, options.tol, options.max_iter)
    if f_hat <= f:
        return best
    psi_hat = to_psi(t_hat)
    _, g_full = objective(psi_hat)
    pg = project(psi_hat + g_full) - psi_hat
    converged = bool(np.linalg.norm(pg) <= options.tol * max(1.0, abs(f_hat)))
    return (psi_hat, f_hat, pg, converged, best[4] + extra_iters)


def fit_ml(design: LmmDesign, y, options: FitOptions | None = None) -> FitResult:
    """Constrained maximum likelihood over beta in R^p and psi in P."""
    return _fit(design, y, options or FitOptions(), with_beta=True)


def fit_reml(design: LmmDesign, y, options: FitOptions | None = None) -> FitResult:
    """REML: maximum likelihood on the beta-free reduced problem (psi only)."""
    reduced, y_tilde = reml.reml_reduce(design, y)
    return _fit(reduced, y_tilde, options or FitOptions(), with_beta=False)


# ---------------------------------------------------------------------------
# Single-variance closed forms (Y_i ~ N(0, 1 + psi), psi >= 0)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleVarianceStats:
    w_score: float
    w_wald: float
    t_lrt: float
    psi_hat: float


def _single_variance_loglik(n: int, m: float, psi: float) -> float:
    return -0.5 * n * (math.log1p(psi) + m / (1.0 + psi))


def example1_stats(y, psi: float) -> SingleVarianceStats:
    """Closed-form W^S, W^W, T^L, and psi_hat for the single-variance model.

    With M = mean(y_i^2): W^S = sqrt(n/2) {M/(1+psi) - 1},
    psi_hat = max(M - 1, 0), W^W = (psi_hat - psi) sqrt(n/2) / (1 + psi),
    T^L = 2 {ell(psi_hat) - ell(psi)}.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one observation")
    if psi < 0:
        raise ValueError("psi must be nonnegative")
    m = float(y @ y) / n
    return single_variance_stats_from_moment(n, m, psi)


def single_variance_stats_from_moment(n: int, m: float, psi: float) -> SingleVarianceStats:
    """Same closed forms, driven by the sufficient statistic M = mean(y^2)."""
    root = math.sqrt(n / 2.0)
    w_score = root * (m / (1.0 + psi) - 1.0)
    psi_hat = max(m - 1.0, 0.0)
    w_wald = (psi_hat - psi) * root / (1.0 + psi)
    t_lrt = 2.0 * (_single_variance_loglik(n, m, psi_hat)
                   - _single_variance_loglik(n, m, psi))
    return SingleVarianceStats(w_score=w_score, w_wald=w_wald,
                               t_lrt=max(t_lrt, 0.0), psi_hat=psi_hat)
