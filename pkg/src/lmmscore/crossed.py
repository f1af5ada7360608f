"""Crossed random-effect designs and structure-exploiting spectral paths.

For factor sizes n_1..n_{r-1}, the covariance is a linear combination of
commuting projections,

    Sigma = sum_j psi_j n_{(j)} P_j + psi_r I_n,   n_{(j)} = prod_{i != j} n_i,

so the eigenvectors do not depend on psi.  The joint eigenstructure is
indexed by per-factor choices between the mean space (span of 1_{n_i}) and
its complement: P_j acts as 1 exactly when every factor other than j is in
its mean space.  This yields a closed spectrum and an orthonormal basis that
diagonalizes Sigma for every psi, both validated against dense paths in the
test suite.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .model import CovarianceStructure, LmmDesign

DENSE_LIMIT = 4096


@dataclass(frozen=True)
class CrossedLayout:
    """Factor sizes n_1..n_{r-1} of a fully crossed intercept design."""

    factor_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.factor_sizes)
        if any(s < 2 for s in sizes):
            raise ValueError("all factor sizes must be >= 2")
        if len(sizes) < 1:
            raise ValueError("need at least one factor")
        object.__setattr__(self, "factor_sizes", sizes)

    @property
    def r(self) -> int:
        return len(self.factor_sizes) + 1

    @property
    def n(self) -> int:
        return int(np.prod(self.factor_sizes))

    def n_complement(self, j: int) -> int:
        """n_{(j)} = prod_{i != j} n_i (1-based j)."""
        return self.n // self.factor_sizes[j - 1]

    @property
    def n_tilde(self) -> int:
        return self.n - 1 - sum(s - 1 for s in self.factor_sizes)


def _z_factor(layout: CrossedLayout, j: int) -> np.ndarray:
    """Z^(j) = 1_{n_1} (x) ... (x) I_{n_j} (x) ... (x) 1_{n_{r-1}} (1-based j)."""
    mats = [
        np.eye(s) if i == j - 1 else np.ones((s, 1))
        for i, s in enumerate(layout.factor_sizes)
    ]
    return reduce(np.kron, mats)


def build_crossed_design(layout: CrossedLayout, dense_limit: int = DENSE_LIMIT) -> LmmDesign:
    """Materialize Z = [Z^(1), ..., Z^(r-1)], diagonal Psi blocks, and X = 1_n."""
    if layout.n > dense_limit:
        raise ValueError(
            f"n = {layout.n} exceeds the dense limit {dense_limit}; "
            "use the spectral path for larger layouts")
    z = np.hstack([_z_factor(layout, j) for j in range(1, layout.r)])
    structure = CovarianceStructure.crossed(layout.factor_sizes)
    x = np.ones((layout.n, 1))
    return LmmDesign(X=x, Z=z, structure=structure)


def crossed_spectrum(layout: CrossedLayout, psi) -> list[tuple[float, int]]:
    """Eigenvalues of Sigma(psi) with multiplicities, from the joint projections.

    Patterns: all factors in the mean space gives psi_r + sum_j psi_j n_{(j)}
    with multiplicity 1; exactly factor k in the complement gives
    psi_r + psi_k n_{(k)} with multiplicity n_k - 1; two or more complements
    give psi_r with multiplicity n~.  Multiplicities sum to n.  Aggregated
    over coinciding values, sorted descending.
    """
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if psi.shape[0] != layout.r:
        raise ValueError(f"psi must have length {layout.r}")
    if psi[-1] <= 0:
        raise ValueError("error variance psi_r must be positive")
    pairs: dict[float, int] = {}

    def add(value, mult):
        if mult > 0:
            pairs[value] = pairs.get(value, 0) + mult

    top = psi[-1] + sum(psi[j - 1] * layout.n_complement(j) for j in range(1, layout.r))
    add(float(top), 1)
    for k in range(1, layout.r):
        add(float(psi[-1] + psi[k - 1] * layout.n_complement(k)),
            layout.factor_sizes[k - 1] - 1)
    add(float(psi[-1]), layout.n_tilde)
    return sorted(pairs.items(), key=lambda t: -t[0])


def _helmert_like(size: int) -> np.ndarray:
    """Orthonormal size x size matrix whose first column is 1/sqrt(size)."""
    mat = np.eye(size)
    mat[:, 0] = 1.0 / math.sqrt(size)
    q, _ = np.linalg.qr(mat)
    # QR can flip signs; pin the mean column.
    if q[0, 0] < 0:
        q = -q
    q[:, 0] = 1.0 / math.sqrt(size)
    return q


@dataclass(frozen=True)
class SpectralBasis:
    """Fixed orthonormal basis Q diagonalizing Sigma(psi) for every psi.

    ``scales`` has shape (r, n): row j < r-1 holds n_{(j+1)} on basis columns
    where projection j+1 acts as the identity (zero elsewhere); the last row
    is all ones (the psi_r direction).  In this basis
    Sigma(psi) = Q diag(scales' psi) Q'.
    """

    layout: CrossedLayout
    Q: np.ndarray
    scales: np.ndarray

    def eigenvalues(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        return psi @ self.scales


def spectral_basis(layout: CrossedLayout) -> SpectralBasis:
    factors = [_helmert_like(s) for s in layout.factor_sizes]
    q = reduce(np.kron, factors) if len(factors) > 1 else factors[0]
    # Column multi-index: mean space iff the per-factor column index is 0.
    r = layout.r
    n = layout.n
    scales = np.zeros((r, n))
    scales[-1, :] = 1.0
    grids = np.meshgrid(*[np.arange(s) for s in layout.factor_sizes], indexing="ij")
    flat = [g.ravel() for g in grids]
    for j in range(1, r):
        active = np.ones(n, dtype=bool)
        for i in range(r - 1):
            if i != j - 1:
                active &= flat[i] == 0
        scales[j - 1, active] = layout.n_complement(j)
    return SpectralBasis(layout=layout, Q=q, scales=scales)
