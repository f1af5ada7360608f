"""Gaussian linear mixed model: covariance parameterization and Sigma-derived matrices.

The marginal model is Y ~ N(X beta, Sigma) with

    Sigma(psi) = Z Psi(psi) Z' + psi_r I_n,
    Psi(psi)   = sum_j psi_j H_j,

where the H_j are fixed, symmetric 0/1 indicator matrices with disjoint
supports, so each cell of Psi is either structurally zero or equal to exactly
one of psi_1..psi_{r-1}.  The last coordinate psi_r is the error variance.
Everything in this module is a pure function of its inputs; all arrays are
dense numpy and treated as immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Shapes of inputs are inconsistent with the model."""


class SingularCovarianceError(ValueError):
    """Sigma(psi) is numerically singular or indefinite."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceStructure:
    """Map from the parameter vector psi to the q x q matrix Psi.

    ``assignment`` is a q x q integer array: 0 marks a structurally zero cell,
    j in {1..r-1} marks a cell equal to psi_j.  The error variance psi_r has
    no cell (H_r = 0); it enters Sigma only through psi_r * I_n.
    """

    q: int
    r: int
    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        if a.shape != (self.q, self.q):
            raise DimensionError(f"assignment must be {self.q}x{self.q}, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise ValueError("assignment must be symmetric")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if a.size and (a.min() < 0 or a.max() > self.r - 1):
            raise ValueError("assignment indices must lie in {0..r-1}")
        present = set(np.unique(a)) - {0}
        if present != set(range(1, self.r)):
            raise ValueError("every parameter index 1..r-1 must appear in assignment")
        object.__setattr__(self, "assignment", a)

    def indicator(self, j: int) -> np.ndarray:
        """H_j, the 0/1 indicator matrix of cells assigned to psi_j (1-based j < r)."""
        if not 1 <= j < self.r:
            raise IndexError(f"indicator index must be in 1..{self.r - 1}")
        return (self.assignment == j).astype(float)

    def indicators(self) -> np.ndarray:
        """Stack of H_1..H_{r-1} with shape (r-1, q, q)."""
        return np.stack([self.indicator(j) for j in range(1, self.r)]) if self.r > 1 \
            else np.zeros((0, self.q, self.q))

    @staticmethod
    def iid(q: int) -> "CovarianceStructure":
        """Psi = psi_1 I_q (single variance component), r = 2."""
        return CovarianceStructure(q=q, r=2, assignment=np.eye(q, dtype=int))

    @staticmethod
    def error_only() -> "CovarianceStructure":
        """No random effects: q = 0, r = 1, Sigma = psi_1 I_n."""
        return CovarianceStructure(q=0, r=1, assignment=np.zeros((0, 0), dtype=int))

    @staticmethod
    def clustered(m: int, q1: int) -> "CovarianceStructure":
        """Psi = I_m (x) Psi_1 with Psi_1 an unstructured symmetric q1 x q1 block.

        psi_{-r} is the half-vectorization of Psi_1 (lower triangle stacked
        column-wise), so r = q1 (q1 + 1) / 2 + 1.
        """
        block = np.zeros((q1, q1), dtype=int)
        idx = 1
        for col in range(q1):
            for row in range(col, q1):
                block[row, col] = idx
                block[col, row] = idx
                idx += 1
        assignment = np.kron(np.eye(m, dtype=int), block)
        return CovarianceStructure(q=m * q1, r=idx, assignment=assignment)

    @staticmethod
    def crossed(factor_sizes) -> "CovarianceStructure":
        """Psi = bdiag(psi_1 I_{n_1}, ..., psi_{r-1} I_{n_{r-1}})."""
        sizes = list(factor_sizes)
        q = sum(sizes)
        assignment = np.zeros((q, q), dtype=int)
        start = 0
        for j, nj in enumerate(sizes, start=1):
            idx = np.arange(start, start + nj)
            assignment[idx, idx] = j
            start += nj
        return CovarianceStructure(q=q, r=len(sizes) + 1, assignment=assignment)


@dataclass(frozen=True)
class LmmDesign:
    """Fixed and random effect design matrices with a covariance structure."""

    X: np.ndarray
    Z: np.ndarray
    structure: CovarianceStructure

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2:
            Z = Z.reshape(Z.shape[0], -1)
        if X.shape[0] != Z.shape[0]:
            raise DimensionError("X and Z must have the same number of rows")
        if Z.shape[1] != self.structure.q:
            raise DimensionError(
                f"Z has {Z.shape[1]} columns but structure.q = {self.structure.q}")
        if X.shape[0] < 1:
            raise DimensionError("need at least one observation")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.structure.q

    @property
    def r(self) -> int:
        return self.structure.r


@dataclass(frozen=True)
class Parameter:
    """Covariance parameter psi (length r), optionally with fixed effects beta.

    ``beta=None`` means the mean is known to be zero; all beta blocks are then
    skipped downstream.
    """

    psi: np.ndarray
    beta: np.ndarray | None = None

    def __post_init__(self):
        psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        object.__setattr__(self, "psi", psi)
        if self.beta is not None:
            object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    @property
    def r(self) -> int:
        return self.psi.shape[0]


@dataclass(frozen=True)
class WhitenedState:
    """Sigma, a whitener W with W Sigma W' = I, and the residual R = W (y - X beta)."""

    sigma: np.ndarray
    whitener: np.ndarray
    residual: np.ndarray


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def build_psi(structure: CovarianceStructure, psi) -> np.ndarray:
    """Assemble Psi(psi) = sum_j psi_j H_j.  Accepts any real vector of length r."""
    v = np.atleast_1d(np.asarray(psi, dtype=float))
    if v.shape[0] != structure.r:
        raise DimensionError(f"psi must have length {structure.r}, got {v.shape[0]}")
    out = np.zeros((structure.q, structure.q))
    for j in range(1, structure.r):
        out += v[j - 1] * structure.indicator(j)
    return out


def build_sigma(design: LmmDesign, v) -> np.ndarray:
    """Sigma(v) = Z Psi(v) Z' + v_r I_n for any real vector v of length r.

    Positive semi-definiteness is deliberately not assumed: the bounds module
    needs Sigma(v) for arbitrary directions v on the unit sphere.
    """
    vv = np.atleast_1d(np.asarray(v, dtype=float))
    psi_mat = build_psi(design.structure, vv)
    n = design.n
    sigma = vv[-1] * np.eye(n)
    if design.q > 0:
        sigma = sigma + design.Z @ psi_mat @ design.Z.T
    return 0.5 * (sigma + sigma.T)


DEFAULT_PSD_TOL = 1e-10


def check_parameter(structure: CovarianceStructure, psi, tol: float = DEFAULT_PSD_TOL) -> str:
    """Classify psi as 'interior', 'boundary', or 'outside' the parameter set.

    Boundary means Psi(psi) is singular (within tol relative to
    max(1, ||Psi||)); outside means psi_r <= 0 or Psi has an eigenvalue below
    -tol * max(1, ||Psi||).
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    v = np.atleast_1d(np.asarray(psi, dtype=float))
    if v.shape[0] != structure.r:
        raise DimensionError(f"psi must have length {structure.r}")
    if v[-1] <= 0:
        return "outside"
    if structure.q == 0:
        return "interior"
    psi_mat = build_psi(structure, v)
    eigs = np.linalg.eigvalsh(psi_mat)
    scale = max(1.0, float(np.max(np.abs(eigs))) if eigs.size else 1.0)
    lam_min = float(eigs[0])
    if lam_min < -tol * scale:
        return "outside"
    if abs(lam_min) <= tol * scale:
        return "boundary"
    return "interior"


def symmetric_inverse_root(mat: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Symmetric M^{-1/2} via eigendecomposition of the symmetrized matrix."""
    sym = 0.5 * (mat + mat.T)
    lam, vec = np.linalg.eigh(sym)
    if lam[0] <= floor:
        raise SingularCovarianceError(
            f"matrix not positive definite (lambda_min = {lam[0]:.3e})")
    return (vec / np.sqrt(lam)) @ vec.T


def whiten(design: LmmDesign, y, theta: Parameter, method: str = "eigh") -> WhitenedState:
    """Whitened state at theta: Sigma, a whitener W, and R = W (y - X beta).

    method='eigh' gives the symmetric inverse square root (default);
    method='cholesky' gives W = L^{-1} from Sigma = L L'.  All exported
    quantities downstream are whitener-invariant.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != design.n:
        raise DimensionError("y length must equal number of rows of X")
    sigma = build_sigma(design, theta.psi)
    if method == "eigh":
        w = symmetric_inverse_root(sigma)
    elif method == "cholesky":
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(str(exc)) from None
        w = np.linalg.inv(chol)
    else:
        raise ValueError(f"unknown whitener method {method!r}")
    resid = y if theta.beta is None else y - design.X @ theta.beta
    return WhitenedState(sigma=sigma, whitener=w, residual=w @ resid)


def a_combination(design: LmmDesign, psi, v) -> np.ndarray:
    """A(v, psi) = Sigma(psi)^{-1/2} Sigma(v) Sigma(psi)^{-1/2}.

    Computed with the symmetric whitener; the eigenvalues (hence all norms
    used by the bounds module) are whitener-invariant.
    """
    sigma = build_sigma(design, psi)
    w = symmetric_inverse_root(sigma)
    return w @ build_sigma(design, v) @ w


# ---------------------------------------------------------------------------
# Model-spec JSON (consumed by the CLI)
# ---------------------------------------------------------------------------


def design_to_json(design: LmmDesign) -> dict:
    """Serialize a design to the documented model-spec dictionary."""
    rows, cols = np.nonzero(np.triu(design.structure.assignment))
    cells = [
        {"row": int(i), "col": int(j), "param": int(design.structure.assignment[i, j])}
        for i, j in zip(rows, cols)
    ]
    return {
        "n": design.n,
        "p": design.p,
        "q": design.q,
        "r": design.r,
        "X": design.X.ravel().tolist(),
        "Z": design.Z.ravel().tolist(),
        "assignment": cells,
    }


def design_from_json(spec: dict) -> LmmDesign:
    """Build a design from a model-spec dictionary (see README for the schema)."""
    for key in ("n", "p", "q", "r", "X", "Z", "assignment"):
        if key not in spec:
            raise ValueError(f"model spec missing field {key!r}")
    n, p, q, r = (int(spec[k]) for k in ("n", "p", "q", "r"))
    X = np.asarray(spec["X"], dtype=float).reshape(n, p) if p > 0 else np.zeros((n, 0))
    Z = np.asarray(spec["Z"], dtype=float).reshape(n, q) if q > 0 else np.zeros((n, 0))
    assignment = np.zeros((q, q), dtype=int)
    for cell in spec["assignment"]:
        i, j, param = int(cell["row"]), int(cell["col"]), int(cell["param"])
        assignment[i, j] = param
        assignment[j, i] = param
    structure = CovarianceStructure(q=q, r=r, assignment=assignment)
    return LmmDesign(X=X, Z=Z, structure=structure)


def load_design(path) -> LmmDesign:
    with open(path) as fh:
        return design_from_json(json.load(fh))


def save_design(design: LmmDesign, path) -> None:
    with open(path, "w") as fh:
        json.dump(design_to_json(design), fh)
