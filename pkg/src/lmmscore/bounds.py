"""Finite-sample normal-approximation quantities and closed-form bounds.

The central object is the spectral-to-Frobenius ratio

    a(v, psi) = ||A(v, psi)|| / ||A(v, psi)||_F <= 1,

with A(v, psi) = Sigma(psi)^{-1/2} Sigma(v) Sigma(psi)^{-1/2}.  Small a
certifies that directional scores v' W^S(psi) are close to standard normal:
when a^2 < 1/8 the density difference is bounded by

    0.14 (4 + 0.29 / (1 - 8 a^2)^2) a.

Closed-form upper bounds: a separable condition-number bound, a cluster bound
c3 m^{-1/2} (1 + ||psi_{-r}|| / psi_r), and psi-free crossed-design bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import inference
from .model import LmmDesign, build_sigma, symmetric_inverse_root

_FRO_EPS = 1e-300


@dataclass(frozen=True)
class ApproximationBound:
    """a-value with the density-difference bound when a^2 < 1/8.

    ``degenerate`` flags the convention a = 1 used when ||A||_F = 0; the
    density bound is then necessarily absent.
    """

    a_value: float
    density_bound: float | None = None
    degenerate: bool = False


def density_bound_from_a(a: float) -> float | None:
    """0.14 (4 + 0.29/(1 - 8a^2)^2) a when a^2 < 1/8, else None."""
    if a * a >= 0.125:
        return None
    return 0.14 * (4.0 + 0.29 / (1.0 - 8.0 * a * a) ** 2) * a


def _a_from_eigs(eigs: np.ndarray) -> float:
    fro = float(np.sqrt(np.sum(eigs**2)))
    if fro <= _FRO_EPS:
        return 1.0
    return float(np.max(np.abs(eigs)) / fro)


def a_ratio(design: LmmDesign, psi, v) -> ApproximationBound:
    """a(v, psi); returns a = 1 with the degenerate flag when ||A||_F = 0."""
    sigma = build_sigma(design, psi)
    w = symmetric_inverse_root(sigma)
    a_mat = w @ build_sigma(design, v) @ w
    eigs = np.linalg.eigvalsh(a_mat)
    fro = float(np.sqrt(np.sum(eigs**2)))
    if fro <= _FRO_EPS:
        return ApproximationBound(a_value=1.0, degenerate=True)
    a = float(np.max(np.abs(eigs)) / fro)
    return ApproximationBound(a_value=a, density_bound=density_bound_from_a(a))


def a_tilde_direction(design: LmmDesign, psi, v_unit) -> ApproximationBound:
    """Density-difference bound for the direction v: a at v~ = I(psi)^{-1/2} v.

    v must be a unit vector; a is scale invariant in its direction argument,
    so no renormalization of v~ is needed.
    """
    v_unit = np.atleast_1d(np.asarray(v_unit, dtype=float))
    if abs(np.linalg.norm(v_unit) - 1.0) > 1e-8:
        raise ValueError("v must be a unit vector")
    info = inference.fisher_information(design, psi).info_psi
    v_tilde = inference.inverse_root_information(info) @ v_unit
    return a_ratio(design, psi, v_tilde)


def separable_bound(design: LmmDesign, psi, v) -> float:
    """||Sigma(psi)^{-1}|| ||Sigma(psi)|| * ||Sigma(v)|| / ||Sigma(v)||_F.

    Always dominates a(v, psi); equality when Sigma(psi) is a multiple of the
    identity.
    """
    eig_psi = np.linalg.eigvalsh(build_sigma(design, psi))
    if eig_psi[0] <= 0:
        raise inference.SingularCovarianceError("Sigma(psi) must be positive definite")
    sig_v = build_sigma(design, v)
    fro = float(np.linalg.norm(sig_v, "fro"))
    if fro <= _FRO_EPS:
        raise ValueError("||Sigma(v)||_F = 0; direction not identifiable")
    spec = float(np.max(np.abs(np.linalg.eigvalsh(sig_v))))
    cond = float(eig_psi[-1] / eig_psi[0])
    return cond * spec / fro


def cluster_bound(m: int, c2: float, psi, c3_override: float | None = None) -> float:
    """Independent-cluster bound c3 m^{-1/2} (1 + ||psi_{-r}|| / psi_r).

    The default c3 = sqrt(2) c2 is valid when all clusters share the same Z_i;
    pass c3_override otherwise (the general constant is not in closed form).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if psi[-1] <= 0:
        raise ValueError("error variance psi_r must be positive")
    c3 = math.sqrt(2.0) * c2 if c3_override is None else c3_override
    ratio = float(np.linalg.norm(psi[:-1]) / psi[-1])
    return c3 / math.sqrt(m) * (1.0 + ratio)


def crossed_bound(n_sizes, restricted: bool = False) -> float:
    """Crossed-design bound on a(v, psi), uniform in psi and v.

    Returns the square root of the a^2 bound so values are directly
    comparable to a_ratio outputs.  Unrestricted:
    sqrt{sum_j 1/(n_j - 1) + (r-2)^2 / n~}; restricted:
    sqrt{max((n_min - 2)^{-1}, (n~ - 1)^{-1})}, with
    n~ = n - 1 - sum_j (n_j - 1).
    """
    sizes = [int(s) for s in n_sizes]
    r = len(sizes) + 1
    if r < 3:
        raise ValueError("crossed bound requires r >= 3 (at least two factors)")
    n_min = min(sizes)
    n = int(np.prod(sizes))
    n_tilde = n - 1 - sum(s - 1 for s in sizes)
    if n_tilde <= 0:
        raise ValueError("n~ = n - 1 - sum(n_j - 1) must be positive")
    if restricted:
        if n_min < 3:
            raise ValueError("restricted bound requires n_min >= 3")
        if n_tilde < 2:
            raise ValueError("restricted bound requires n~ >= 2")
        a2 = max(1.0 / (n_min - 2), 1.0 / (n_tilde - 1))
    else:
        if n_min < 2:
            raise ValueError("unrestricted bound requires n_min >= 2")
        a2 = sum(1.0 / (s - 1) for s in sizes) + (r - 2) ** 2 / n_tilde
    return math.sqrt(a2)


def sup_a_estimate(design: LmmDesign, psi, samples: int = 500, seed: int = 0,
                   ascent_steps: int = 50) -> float:
    """Numerical lower bound on sup over unit v of a(v, psi).

    Random sphere samples followed by coordinate-wise hill climbing from the
    best candidate.  Deterministic given the seed.  This explores the sup; it
    never overstates it, so it is directly comparable to the closed-form
    upper bounds.
    """
    r = design.r
    sigma = build_sigma(design, psi)
    w = symmetric_inverse_root(sigma)
    # Precompute B_j = W Sigma(e_j) W so A(v) = sum_j v_j B_j per direction.
    basis = np.stack([w @ build_sigma(design, np.eye(r)[j]) @ w for j in range(r)])

    def a_of(v):
        a_mat = np.tensordot(v, basis, axes=1)
        return _a_from_eigs(np.linalg.eigvalsh(a_mat))

    rng = np.random.default_rng(seed)
    if r == 1:
        return a_of(np.ones(1))
    draws = rng.standard_normal((samples, r))
    draws /= np.linalg.norm(draws, axis=1, keepdims=True)
    values = np.array([a_of(v) for v in draws])
    best_idx = int(np.argmax(values))
    best_v, best_a = draws[best_idx], float(values[best_idx])

    step = 0.5
    for _ in range(ascent_steps):
        improved = False
        for k in range(r):
            for sign in (1.0, -1.0):
                cand = best_v.copy()
                cand[k] += sign * step
                cand /= np.linalg.norm(cand)
                val = a_of(cand)
                if val > best_a:
                    best_a, best_v = val, cand
                    improved = True
        if not improved:
            step *= 0.5
            if step < 1e-10:
                break
    return best_a
