import numpy as np
import pytest

from lmmscore import bounds
from lmmscore.crossed import (
    CrossedLayout,
    build_crossed_design,
    crossed_spectrum,
    spectral_basis,
)
from lmmscore.model import LmmDesign, build_sigma


def dense_sigma(layout, psi):
    design = build_crossed_design(layout)
    return build_sigma(design, psi)


class TestLayout:
    def test_counts(self):
        layout = CrossedLayout((4, 6))
        assert layout.r == 3 and layout.n == 24
        assert layout.n_complement(1) == 6 and layout.n_complement(2) == 4
        assert layout.n_tilde == 24 - 1 - 3 - 5

    def test_rejects_tiny_factor(self):
        with pytest.raises(ValueError):
            CrossedLayout((1, 5))


def test_factor_projections_commute():
    layout = CrossedLayout((3, 4))
    design = build_crossed_design(layout)
    z1 = design.Z[:, :3]
    z2 = design.Z[:, 3:]
    p1 = z1 @ z1.T / layout.n_complement(1)
    p2 = z2 @ z2.T / layout.n_complement(2)
    for p in (p1, p2):
        np.testing.assert_allclose(p @ p, p, atol=1e-12)
    np.testing.assert_allclose(p1 @ p2, p2 @ p1, atol=1e-12)


def test_spectrum_two_by_two_hand_values():
    # n1 = n2 = 2, psi = (1, 1, 1): eigenvalues 5, 3, 3, 1
    layout = CrossedLayout((2, 2))
    spec = crossed_spectrum(layout, [1.0, 1.0, 1.0])
    assert spec == [(5.0, 1), (3.0, 2), (1.0, 1)]


def test_spectrum_matches_dense():
    rng = np.random.default_rng(41)
    for sizes in [(2, 3), (4, 4), (3, 5), (2, 2, 3)]:
        layout = CrossedLayout(sizes)
        psi = np.append(rng.uniform(0.0, 2.0, size=layout.r - 1),
                        rng.uniform(0.5, 2.0))
        spec = crossed_spectrum(layout, psi)
        flat = np.concatenate([np.full(m, val) for val, m in spec])
        dense = np.sort(np.linalg.eigvalsh(dense_sigma(layout, psi)))[::-1]
        np.testing.assert_allclose(np.sort(flat)[::-1], dense, atol=1e-8)
        assert sum(m for _, m in spec) == layout.n


def test_spectrum_rejects_bad_input():
    layout = CrossedLayout((3, 3))
    with pytest.raises(ValueError):
        crossed_spectrum(layout, [1.0, 1.0])
    with pytest.raises(ValueError):
        crossed_spectrum(layout, [1.0, 1.0, 0.0])


class TestSpectralBasis:
    def test_orthonormal(self):
        basis = spectral_basis(CrossedLayout((3, 4)))
        np.testing.assert_allclose(basis.Q.T @ basis.Q, np.eye(12), atol=1e-10)

    def test_reconstructs_sigma(self):
        rng = np.random.default_rng(42)
        for sizes in [(2, 2), (3, 4), (2, 3, 2)]:
            layout = CrossedLayout(sizes)
            basis = spectral_basis(layout)
            psi = np.append(rng.uniform(0.0, 2.0, size=layout.r - 1),
                            rng.uniform(0.5, 2.0))
            lam = basis.eigenvalues(psi)
            rebuilt = basis.Q @ np.diag(lam) @ basis.Q.T
            np.testing.assert_allclose(rebuilt, dense_sigma(layout, psi),
                                       atol=1e-8)

    def test_eigenvalue_multiplicities_match_spectrum(self):
        layout = CrossedLayout((4, 5))
        basis = spectral_basis(layout)
        psi = np.array([0.7, 0.3, 1.1])
        lam = np.sort(basis.eigenvalues(psi))[::-1]
        flat = np.concatenate([np.full(m, v) for v, m in
                               crossed_spectrum(layout, psi)])
        np.testing.assert_allclose(lam, flat, atol=1e-12)

    def test_mean_column_spans_intercept(self):
        basis = spectral_basis(CrossedLayout((3, 3)))
        np.testing.assert_allclose(basis.Q[:, 0], np.full(9, 1 / 3), atol=1e-12)


def test_a_via_spectrum_matches_dense():
    # a(v, psi) computed from the closed spectrum equals the dense ratio
    layout = CrossedLayout((4, 4))
    basis = spectral_basis(layout)
    design = build_crossed_design(layout)
    design0 = LmmDesign(X=np.zeros((design.n, 0)), Z=design.Z,
                        structure=design.structure)
    rng = np.random.default_rng(43)
    for _ in range(5):
        psi = np.append(rng.uniform(0.1, 2.0, size=2), rng.uniform(0.5, 2.0))
        v = rng.standard_normal(3)
        lam_psi = basis.eigenvalues(psi)
        lam_v = basis.eigenvalues(v)
        ratio = lam_v / lam_psi
        a_spec = np.max(np.abs(ratio)) / np.linalg.norm(ratio)
        a_dense = bounds.a_ratio(design0, psi, v).a_value
        assert abs(a_spec - a_dense) < 1e-10


def test_dense_limit_enforced():
    with pytest.raises(ValueError):
        build_crossed_design(CrossedLayout((100, 100)))
