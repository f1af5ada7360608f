"""Log-likelihood, scores, Fisher information, and the four test statistics.

All quantities are for the marginal Gaussian model Y ~ N(X beta, Sigma(psi)).
With R = Sigma^{-1/2} (Y - X beta) and A_j = Sigma^{-1/2} (dSigma/dpsi_j)
Sigma^{-1/2}:

    S(psi_j)        = {R' A_j R - tr(A_j)} / 2
    S(beta)         = X' Sigma^{-1/2} R
    I(beta; psi)    = X' Sigma^{-1} X
    I_{ij}(psi)     = tr(A_i A_j) / 2

The full information is block-diagonal in (beta, psi).  A Parameter with
beta=None selects the known-beta-zero code path: beta blocks are skipped and
statistics use the psi blocks only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .model import (
    DimensionError,
    LmmDesign,
    Parameter,
    SingularCovarianceError,
    build_sigma,
    symmetric_inverse_root,
)


class SingularInformationError(ValueError):
    """Fisher information is numerically singular: unidentifiable parameterization."""


class StatisticKind(enum.Enum):
    Score = "score"
    ProfileScore = "pscr"
    RestrictedScore = "rscr"
    Wald = "wald"
    LikelihoodRatio = "lrt"

    @staticmethod
    def parse(name: str) -> "StatisticKind":
        for kind in StatisticKind:
            if kind.value == name or kind.name.lower() == name.lower():
                return kind
        raise ValueError(f"unknown statistic {name!r}")


@dataclass
class ScoreReport:
    """Score vectors and information blocks; unfilled fields are None."""

    score_beta: np.ndarray | None = None
    score_psi: np.ndarray | None = None
    info_beta: np.ndarray | None = None
    info_psi: np.ndarray | None = None
    loglik: float | None = None


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------


def _cho_factor(design: LmmDesign, psi) -> tuple:
    sigma = build_sigma(design, psi)
    try:
        return sigma, sla.cho_factor(sigma, lower=True)
    except sla.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from None


def _dsigma(design: LmmDesign, j: int) -> np.ndarray:
    """dSigma/dpsi_j; j is 1-based, j = r gives the identity."""
    if j == design.r:
        return np.eye(design.n)
    h = design.structure.indicator(j)
    return design.Z @ h @ design.Z.T


def inverse_root_information(info: np.ndarray, floor_ratio: float = 1e-12) -> np.ndarray:
    """Symmetric I^{-1/2} with an eigenvalue floor check."""
    lam, vec = np.linalg.eigh(0.5 * (info + info.T))
    if lam[0] <= floor_ratio * max(lam[-1], 0.0) or lam[-1] <= 0:
        raise SingularInformationError(
            f"information not positive definite (lambda_min = {lam[0]:.3e})")
    return (vec / np.sqrt(lam)) @ vec.T


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def log_likelihood(design: LmmDesign, y, theta: Parameter) -> float:
    """ell(theta) = -{log|Sigma| + (y - X beta)' Sigma^{-1} (y - X beta)} / 2."""
    y = np.asarray(y, dtype=float).ravel()
    e = y if theta.beta is None else y - design.X @ theta.beta
    sigma, cf = _cho_factor(design, theta.psi)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = float(e @ sla.cho_solve(cf, e))
    return -0.5 * (logdet + quad)


def score(design: LmmDesign, y, theta: Parameter) -> ScoreReport:
    """Score vectors S(psi) and, when beta is supplied, S(beta)."""
    y = np.asarray(y, dtype=float).ravel()
    e = y if theta.beta is None else y - design.X @ theta.beta
    sigma, cf = _cho_factor(design, theta.psi)
    u = sla.cho_solve(cf, e)  # Sigma^{-1} e
    r = design.r
    score_psi = np.empty(r)
    for j in range(1, r + 1):
        dj = _dsigma(design, j)
        # R' A_j R = e' Sigma^{-1} dSigma_j Sigma^{-1} e; tr A_j = tr(Sigma^{-1} dSigma_j)
        quad = float(u @ dj @ u)
        tr = float(np.trace(sla.cho_solve(cf, dj)))
        score_psi[j - 1] = 0.5 * (quad - tr)
    report = ScoreReport(score_psi=score_psi)
    if theta.beta is not None and design.p > 0:
        report.score_beta = design.X.T @ u
    return report


def fisher_information(design: LmmDesign, psi) -> ScoreReport:
    """Information blocks: I(psi) = [tr(A_i A_j)/2] and I(beta; psi) = X' Sigma^{-1} X.

    The psi block does not depend on beta, so only psi is taken.
    """
    sigma, cf = _cho_factor(design, psi)
    r = design.r
    # B_j = Sigma^{-1} dSigma_j; tr(A_i A_j) = tr(B_i B_j)
    bs = [sla.cho_solve(cf, _dsigma(design, j)) for j in range(1, r + 1)]
    info_psi = np.empty((r, r))
    for i in range(r):
        for j in range(i, r):
            info_psi[i, j] = info_psi[j, i] = 0.5 * float(np.sum(bs[i] * bs[j].T))
    report = ScoreReport(info_psi=info_psi)
    if design.p > 0:
        report.info_beta = design.X.T @ sla.cho_solve(cf, design.X)
    else:
        report.info_beta = np.zeros((0, 0))
    return report


def information_positive_definite(design: LmmDesign, tol: float = 1e-10) -> bool:
    """Theorem-style identifiability check: is I(psi) positive definite?

    Equivalent to ||Sigma(v)|| > 0 for every unit v, which holds iff the Gram
    matrix G_ij = <Sigma(e_i), Sigma(e_j)>_F is positive definite.
    """
    r = design.r
    basis = [build_sigma(design, np.eye(r)[j]) for j in range(r)]
    gram = np.empty((r, r))
    for i in range(r):
        for j in range(i, r):
            gram[i, j] = gram[j, i] = float(np.sum(basis[i] * basis[j]))
    lam = np.linalg.eigvalsh(gram)
    return bool(lam[0] > tol * max(1.0, lam[-1]))


def score_statistic(design: LmmDesign, y, theta: Parameter) -> tuple[np.ndarray, float]:
    """W^S(theta) = I(theta)^{-1/2} S(theta) and T^S = ||W^S||^2.

    With beta absent, uses the psi blocks only (known-beta form).  The
    information root is the symmetric inverse square root, exploiting the
    block-diagonal structure in (beta, psi).
    """
    rep_s = score(design, y, theta)
    rep_i = fisher_information(design, theta.psi)
    w_psi = inverse_root_information(rep_i.info_psi) @ rep_s.score_psi
    if theta.beta is not None and design.p > 0:
        w_beta = inverse_root_information(rep_i.info_beta) @ rep_s.score_beta
        w = np.concatenate([w_beta, w_psi])
    else:
        w = w_psi
    return w, float(w @ w)


def gls_beta(design: LmmDesign, y, psi) -> np.ndarray:
    """beta~(psi) = {X' Sigma^{-1} X}^{-1} X' Sigma^{-1} y."""
    if design.p == 0:
        return np.zeros(0)
    sigma, cf = _cho_factor(design, psi)
    w = sla.cho_solve(cf, design.X)
    gram = design.X.T @ w
    lam = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    if lam[0] <= 1e-10 * max(1.0, lam[-1]):
        raise DimensionError("X is rank deficient; GLS estimate undefined")
    return np.linalg.solve(gram, w.T @ y)


def profile_score_statistic(design: LmmDesign, y, psi) -> float:
    """T^P(psi) = S(psi; beta~)' I(psi)^{-1} S(psi; beta~) with GLS plug-in beta~."""
    y = np.asarray(y, dtype=float).ravel()
    beta_tilde = gls_beta(design, y, psi)
    rep_s = score(design, y, Parameter(psi=np.asarray(psi, float), beta=beta_tilde))
    info = fisher_information(design, psi).info_psi
    lam = np.linalg.eigvalsh(info)
    if lam[0] <= 1e-12 * max(lam[-1], 0.0):
        raise SingularInformationError("I(psi) singular in profile score statistic")
    return float(rep_s.score_psi @ np.linalg.solve(info, rep_s.score_psi))


def wald_statistic(psi, psi_hat, info_at_hat: np.ndarray) -> float:
    """T^W = (psi_hat - psi)' I (psi_hat - psi) with I evaluated at the estimates."""
    d = np.atleast_1d(np.asarray(psi_hat, float)) - np.atleast_1d(np.asarray(psi, float))
    info = np.atleast_2d(np.asarray(info_at_hat, float))
    if info.shape != (d.size, d.size):
        raise DimensionError("information matrix shape does not match psi")
    return float(d @ info @ d)


LRT_CLAMP = 1e-8


def lrt_statistic(design: LmmDesign, y, psi, theta_hat: Parameter) -> float:
    """T^L(psi) = 2 {ell(theta_hat) - ell at the given psi (beta profiled if p > 0)}.

    Tiny negative values (>= -1e-8) are round-off and clamp to 0; anything
    more negative signals a failed optimization upstream and raises.
    """
    y = np.asarray(y, dtype=float).ravel()
    ll_hat = log_likelihood(design, y, theta_hat)
    if design.p > 0:
        beta0 = gls_beta(design, y, psi)
        theta0 = Parameter(psi=np.asarray(psi, float), beta=beta0)
    else:
        theta0 = Parameter(psi=np.asarray(psi, float))
    value = 2.0 * (ll_hat - log_likelihood(design, y, theta0))
    if value < -LRT_CLAMP:
        raise ValueError(
            f"likelihood ratio statistic is {value:.3e} < -{LRT_CLAMP}; "
            "the supplied theta_hat is not a maximizer")
    return max(value, 0.0)
