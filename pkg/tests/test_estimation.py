import math

import numpy as np
import pytest
from scipy import optimize

from lmmscore import estimation, inference
from lmmscore.estimation import (
    FitOptions,
    example1_stats,
    fit_ml,
    fit_reml,
    project_psi,
    single_variance_stats_from_moment,
)
from lmmscore.model import CovarianceStructure, LmmDesign, Parameter, build_psi


def cluster_design(rng, m=20, size=4, p=2):
    structure = CovarianceStructure.iid(m)
    z = np.zeros((m * size, m))
    for i in range(m):
        z[i * size:(i + 1) * size, i] = 1.0
    return LmmDesign(X=rng.standard_normal((m * size, p)), Z=z,
                     structure=structure)


def simulate(rng, design, psi, beta=None):
    u = rng.standard_normal(design.Z.shape[1]) * math.sqrt(psi[0])
    e = rng.standard_normal(design.n) * math.sqrt(psi[-1])
    y = design.Z @ u + e
    if beta is not None:
        y = y + design.X @ beta
    return y


class TestProjectPsi:
    def test_diagonal_box_clip(self):
        s = CovarianceStructure.crossed([3, 3])
        out = project_psi(s, np.array([-0.5, 2.0, -1.0]), 1e-6)
        np.testing.assert_allclose(out, [0.0, 2.0, 1e-6])

    def test_vech_block_projection_matches_eigh(self):
        s = CovarianceStructure.clustered(1, 2)
        psi = np.array([1.0, 3.0, 1.0, 0.5])  # indefinite 2x2 block
        out = project_psi(s, psi, 1e-8)
        block = build_psi(s, out)
        lam = np.linalg.eigvalsh(block)
        assert lam[0] >= -1e-12
        # nearest-PSD property: projection of the eigendecomposition
        raw = build_psi(s, psi)
        lam_r, vec_r = np.linalg.eigh(raw)
        nearest = (vec_r * np.maximum(lam_r, 0.0)) @ vec_r.T
        np.testing.assert_allclose(block, nearest, atol=1e-12)

    def test_feasible_point_untouched(self):
        s = CovarianceStructure.clustered(1, 2)
        psi = np.array([1.0, 0.2, 0.8, 1.5])
        np.testing.assert_allclose(project_psi(s, psi.copy(), 1e-8), psi)


class TestSingleVariance:
    def test_hand_values_n2_m2(self):
        # n = 2, M = 2, psi = 0: W^S = 1, psi_hat = 1, W^W = 1,
        # T^L = 2 ell(1) - 2 ell(0) = 2 - 2 log 2
        st = single_variance_stats_from_moment(2, 2.0, 0.0)
        assert abs(st.w_score - 1.0) < 1e-14
        assert abs(st.psi_hat - 1.0) < 1e-14
        assert abs(st.w_wald - 1.0) < 1e-14
        assert abs(st.t_lrt - (2.0 - 2.0 * math.log(2.0))) < 1e-14

    def test_boundary_estimate(self):
        st = single_variance_stats_from_moment(10, 0.5, 0.0)
        assert st.psi_hat == 0.0
        assert st.t_lrt == 0.0 and st.w_wald == 0.0
        assert st.w_score < 0.0

    def test_psi_hat_matches_numeric_maximizer(self):
        rng = np.random.default_rng(51)
        for _ in range(10):
            n = int(rng.integers(3, 40))
            m = float(rng.uniform(0.3, 4.0))
            st = single_variance_stats_from_moment(n, m, 0.0)
            res = optimize.minimize_scalar(
                lambda t: -estimation._single_variance_loglik(n, m, t),
                bounds=(0.0, 20.0), method="bounded",
                options={"xatol": 1e-12})
            assert abs(st.psi_hat - res.x) < 1e-6

    def test_generic_score_agreement(self):
        # error-only design with t = 1 + psi reproduces W^S up to the chain
        # rule factor dt/dpsi = 1
        rng = np.random.default_rng(52)
        y = rng.standard_normal(30) * 1.2
        psi = 0.4
        st = example1_stats(y, psi)
        design = LmmDesign(X=np.zeros((30, 0)), Z=np.zeros((30, 0)),
                           structure=CovarianceStructure.error_only())
        w, t = inference.score_statistic(design, y, Parameter(psi=[1.0 + psi]))
        assert abs(w[0] - st.w_score) < 1e-10
        assert abs(t - st.w_score**2) < 1e-10

    def test_input_validation(self):
        with pytest.raises(ValueError):
            example1_stats([], 0.0)
        with pytest.raises(ValueError):
            example1_stats([1.0], -0.1)


class TestFitML:
    def test_balanced_one_way_matches_grid(self):
        rng = np.random.default_rng(53)
        design = cluster_design(rng, m=15, size=4, p=0)
        design = LmmDesign(X=np.zeros((design.n, 0)), Z=design.Z,
                           structure=design.structure)
        y = simulate(rng, design, [0.8, 1.0])
        res = fit_ml(design, y)
        assert res.converged
        obj = estimation._profiled_objective(design, y)
        # fit value beats a dense feasible grid
        grid_best = max(obj(np.array([a, b]))[0]
                        for a in np.linspace(0.0, 3.0, 25)
                        for b in np.linspace(0.05, 3.0, 25))
        assert res.loglik_at_hat >= grid_best - 1e-6
        # first-order condition via tiny projected step
        assert res.gradient_norm < 1e-6 * max(1.0, abs(res.loglik_at_hat))

    def test_loglik_at_hat_dominates_truth(self):
        rng = np.random.default_rng(54)
        design = cluster_design(rng, m=12, size=3, p=2)
        beta = rng.standard_normal(2)
        psi = np.array([0.5, 1.0])
        y = simulate(rng, design, psi, beta)
        res = fit_ml(design, y)
        ll_true = inference.log_likelihood(design, y,
                                           Parameter(psi=psi, beta=beta))
        assert res.loglik_at_hat >= ll_true - 1e-9
        assert res.theta_hat.beta is not None

    def test_boundary_detection(self):
        # pure-noise data pushes the cluster variance to zero
        rng = np.random.default_rng(55)
        design = cluster_design(rng, m=10, size=3, p=0)
        design = LmmDesign(X=np.zeros((design.n, 0)), Z=design.Z,
                           structure=design.structure)
        opts = FitOptions(max_iter=100, starts=1)
        hits = 0
        for rep in (0, 3, 4):
            y = np.random.default_rng(100 + rep).standard_normal(design.n) * 0.7
            res = fit_ml(design, y, opts)
            hits += res.on_boundary
        assert hits >= 2

    def test_max_iter_respected(self):
        rng = np.random.default_rng(56)
        design = cluster_design(rng, m=8, size=3, p=0)
        design = LmmDesign(X=np.zeros((design.n, 0)), Z=design.Z,
                           structure=design.structure)
        y = simulate(rng, design, [0.8, 1.0])
        res = fit_ml(design, y, FitOptions(max_iter=2, starts=1))
        assert res.iterations <= 2


class TestFitREML:
    def test_balanced_anova_closed_form(self):
        # balanced one-way REML: psi_e = MSE, psi_u = (MSA - MSE)/k when
        # nonnegative
        rng = np.random.default_rng(57)
        m, k = 25, 4
        design = cluster_design(rng, m=m, size=k, p=1)
        design = LmmDesign(X=np.ones((m * k, 1)), Z=design.Z,
                           structure=design.structure)
        y = simulate(rng, design, [1.2, 0.9], beta=np.array([0.3]))
        groups = y.reshape(m, k)
        gm = groups.mean(axis=1)
        mse = float(((groups - gm[:, None]) ** 2).sum() / (m * (k - 1)))
        msa = float(k * ((gm - gm.mean()) ** 2).sum() / (m - 1))
        res = fit_reml(design, y, FitOptions(tol=1e-10))
        assert res.converged
        np.testing.assert_allclose(res.theta_hat.psi,
                                   [(msa - mse) / k, mse], rtol=5e-6)

    def test_reml_exceeds_ml_variance_estimate(self):
        rng = np.random.default_rng(58)
        design = cluster_design(rng, m=10, size=3, p=3)
        y = simulate(rng, design, [1.0, 1.0], beta=rng.standard_normal(3))
        ml = fit_ml(design, y)
        rm = fit_reml(design, y)
        # REML corrects the downward ML bias in the error variance
        assert rm.theta_hat.psi[-1] >= ml.theta_hat.psi[-1] - 1e-8
