import math

import numpy as np
import pytest

from lmmscore import bounds
from lmmscore.model import CovarianceStructure, LmmDesign


def error_only_design(n):
    structure = CovarianceStructure.error_only()
    return LmmDesign(X=np.zeros((n, 0)), Z=np.zeros((n, 0)), structure=structure)


def random_design(rng, n=10, q=3, p=0):
    structure = CovarianceStructure.iid(q)
    return LmmDesign(X=rng.standard_normal((n, p)) if p else np.zeros((n, 0)),
                     Z=rng.standard_normal((n, q)), structure=structure)


class TestDensityBound:
    def test_reference_value(self):
        # a = 0.1414: 0.14 (4 + 0.29 / (1 - 8 a^2)^2) * a
        val = bounds.density_bound_from_a(0.1414)
        assert abs(val - 0.0873) < 5e-4

    def test_absent_at_threshold(self):
        assert bounds.density_bound_from_a(math.sqrt(0.125)) is None
        assert bounds.density_bound_from_a(0.9) is None

    def test_small_a_slope(self):
        a = 1e-9
        assert abs(bounds.density_bound_from_a(a) / a - 0.6006) < 1e-6


class TestARatio:
    def test_error_only_value(self):
        # Sigma(psi) = t I, Sigma(v) = v I: a = 1/sqrt(n) for every direction
        design = error_only_design(16)
        ab = bounds.a_ratio(design, [1.0], [1.0])
        assert abs(ab.a_value - 0.25) < 1e-12
        assert not ab.degenerate

    def test_scale_invariance_in_v(self):
        rng = np.random.default_rng(31)
        design = random_design(rng)
        psi = [0.7, 1.2]
        v = rng.standard_normal(2)
        a1 = bounds.a_ratio(design, psi, v).a_value
        a2 = bounds.a_ratio(design, psi, -3.7 * v).a_value
        assert abs(a1 - a2) < 1e-12

    def test_rank_one_direction_gives_a_one(self):
        rng = np.random.default_rng(32)
        design = random_design(rng, n=6, q=1)
        # v with zero error component: Sigma(v) = v_1 z z' has rank one
        ab = bounds.a_ratio(design, [0.5, 1.0], [1.0, 0.0])
        assert abs(ab.a_value - 1.0) < 1e-10

    def test_degenerate_direction(self):
        design = error_only_design(4)
        ab = bounds.a_ratio(design, [1.0], [0.0])
        assert ab.degenerate and ab.a_value == 1.0 and ab.density_bound is None


def test_separable_bound_dominates():
    rng = np.random.default_rng(33)
    for _ in range(100):
        design = random_design(rng, n=7, q=2)
        psi = rng.uniform(0.2, 2.0, size=2)
        v = rng.standard_normal(2)
        a = bounds.a_ratio(design, psi, v).a_value
        assert bounds.separable_bound(design, psi, v) >= a - 1e-12


def test_separable_bound_exact_when_sigma_identity():
    design = error_only_design(9)
    assert abs(bounds.separable_bound(design, [2.0], [1.0]) - 1 / 3) < 1e-12


class TestClusterBound:
    def test_reference_value(self):
        val = bounds.cluster_bound(500, 3.0, [0.0, 0.0, 0.0, 1.0])
        assert abs(val - 3 * math.sqrt(2) / math.sqrt(500)) < 1e-12

    def test_ratio_doubles_bound(self):
        base = bounds.cluster_bound(100, 2.0, [0.0, 1.0])
        unit = bounds.cluster_bound(100, 2.0, [1.0, 1.0])
        assert abs(unit / base - 2.0) < 1e-12

    def test_override(self):
        val = bounds.cluster_bound(25, 2.0, [0.0, 1.0], c3_override=7.0)
        assert abs(val - 7.0 / 5.0) < 1e-12


class TestCrossedBound:
    def test_reference_values(self):
        assert abs(bounds.crossed_bound([10, 10]) - math.sqrt(19 / 81)) < 1e-12
        assert abs(bounds.crossed_bound([10, 10], restricted=True)
                   - math.sqrt(0.125)) < 1e-12

    def test_preconditions(self):
        with pytest.raises(ValueError):
            bounds.crossed_bound([10])  # r = 2 < 3
        with pytest.raises(ValueError):
            bounds.crossed_bound([2, 2], restricted=True)


class TestSupAEstimate:
    def test_example1_constant_direction(self):
        design = error_only_design(25)
        assert abs(bounds.sup_a_estimate(design, [1.0]) - 0.2) < 1e-12

    def test_dominated_by_crossed_bound(self):
        from lmmscore.crossed import CrossedLayout, build_crossed_design
        design = build_crossed_design(CrossedLayout((5, 6)))
        design = LmmDesign(X=np.zeros((design.n, 0)), Z=design.Z,
                           structure=design.structure)
        est = bounds.sup_a_estimate(design, [0.5, 0.5, 1.0], samples=100)
        assert est <= bounds.crossed_bound([5, 6]) + 1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(34)
        design = random_design(rng)
        v1 = bounds.sup_a_estimate(design, [0.5, 1.0], samples=50, seed=9)
        v2 = bounds.sup_a_estimate(design, [0.5, 1.0], samples=50, seed=9)
        assert v1 == v2


def test_a_tilde_direction_requires_unit_vector():
    rng = np.random.default_rng(35)
    design = random_design(rng)
    with pytest.raises(ValueError):
        bounds.a_tilde_direction(design, [0.5, 1.0], [2.0, 0.0])
    ab = bounds.a_tilde_direction(design, [0.5, 1.0], [1.0, 0.0])
    assert 0.0 < ab.a_value <= 1.0
