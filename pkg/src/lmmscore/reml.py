"""Restricted-likelihood reduction: project out the fixed effects.

For X of full column rank p < n, pick a semi-orthogonal V (n x (n-p)) with
V'X = 0.  Then Y~ = V'Y satisfies Y~ ~ N(0, Sigma~) with
Sigma~ = Z~ Psi Z~' + psi_r I_{n-p} and Z~ = V'Z: a known-beta-zero instance
of the marginal model with sample size n - p.  All inference operations apply
unchanged on the reduced model, and every exported statistic is invariant to
the choice of V (any two bases differ by an orthogonal factor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import inference
from .model import DimensionError, LmmDesign, Parameter

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RemlTransform:
    """Null-space basis V and the reduced (beta-free) design."""

    V: np.ndarray
    reduced_design: LmmDesign

    @property
    def n_reduced(self) -> int:
        return self.V.shape[1]


def null_basis(X: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of col(X), via SVD.

    Raises if X is rank deficient relative to RANK_TOL * ||X||.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    if not 0 < p < n:
        raise DimensionError(f"need 0 < p < n, got n={n}, p={p}")
    u, s, _ = np.linalg.svd(X, full_matrices=True)
    if s[-1] <= RANK_TOL * s[0]:
        raise DimensionError(
            f"X is rank deficient (smallest singular value {s[-1]:.3e})")
    return u[:, p:]


def reml_transform(design: LmmDesign) -> RemlTransform:
    """Build the REML reduction for a design; identity when p = 0."""
    if design.p == 0:
        v = np.eye(design.n)
        return RemlTransform(V=v, reduced_design=design)
    v = null_basis(design.X)
    reduced = LmmDesign(
        X=np.zeros((v.shape[1], 0)),
        Z=v.T @ design.Z,
        structure=design.structure,
    )
    return RemlTransform(V=v, reduced_design=reduced)


def reml_reduce(design: LmmDesign, y) -> tuple[LmmDesign, np.ndarray]:
    """Reduce (design, y) to the beta-free problem (design~, y~ = V'y)."""
    y = np.asarray(y, dtype=float).ravel()
    if design.p == 0:
        return design, y
    transform = reml_transform(design)
    return transform.reduced_design, transform.V.T @ y


def restricted_score_statistic(design: LmmDesign, y, psi) -> tuple[np.ndarray, float]:
    """(W~^S, T~^S): the score statistic of the REML-reduced model at psi."""
    reduced, y_tilde = reml_reduce(design, y)
    theta = Parameter(psi=np.asarray(psi, dtype=float))
    return inference.score_statistic(reduced, y_tilde, theta)


def restricted_log_likelihood(design: LmmDesign, y, psi) -> float:
    """Restricted log-likelihood: the log-likelihood of the reduced model."""
    reduced, y_tilde = reml_reduce(design, y)
    return inference.log_likelihood(reduced, y_tilde, Parameter(psi=np.asarray(psi, float)))
