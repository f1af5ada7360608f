import numpy as np
import pytest

from lmmscore import inference
from lmmscore.inference import StatisticKind
from lmmscore.model import CovarianceStructure, LmmDesign, Parameter, build_sigma


def make_design(rng, kind="iid", n=9, p=2):
    if kind == "iid":
        structure = CovarianceStructure.iid(3)
    elif kind == "cluster":
        structure = CovarianceStructure.clustered(2, 2)
    else:
        structure = CovarianceStructure.crossed([2, 2])
    return LmmDesign(X=rng.standard_normal((n, p)),
                     Z=rng.standard_normal((n, structure.q)),
                     structure=structure)


def interior_psi(structure, rng):
    psi = 0.2 + rng.uniform(0.2, 1.0, size=structure.r)
    if structure.r == 4 and structure.q == 4:  # clustered 2x2 block
        psi[1] = 0.1 * min(psi[0], psi[2])
    return psi


def test_score_matches_finite_differences():
    rng = np.random.default_rng(11)
    for kind in ("iid", "cluster", "crossed"):
        design = make_design(rng, kind)
        psi = interior_psi(design.structure, rng)
        beta = rng.standard_normal(design.p)
        y = rng.standard_normal(design.n)
        theta = Parameter(psi=psi, beta=beta)
        grad = inference.score(design, y, theta)
        eps = 1e-6
        for j in range(design.r):
            up, dn = psi.copy(), psi.copy()
            up[j] += eps
            dn[j] -= eps
            fd = (inference.log_likelihood(design, y, Parameter(psi=up, beta=beta))
                  - inference.log_likelihood(design, y, Parameter(psi=dn, beta=beta))) / (2 * eps)
            assert abs(grad.score_psi[j] - fd) < 1e-5 * max(1.0, abs(fd))
        for k in range(design.p):
            up = beta.copy()
            up[k] += eps
            dn = beta.copy()
            dn[k] -= eps
            fd = (inference.log_likelihood(design, y, Parameter(psi=psi, beta=up))
                  - inference.log_likelihood(design, y, Parameter(psi=psi, beta=dn))) / (2 * eps)
            assert abs(grad.score_beta[k] - fd) < 1e-5 * max(1.0, abs(fd))


def test_information_is_score_covariance():
    # small Monte Carlo version of the identity I = cov(S)
    rng = np.random.default_rng(12)
    design = make_design(rng, "iid", n=6, p=1)
    psi = np.array([0.6, 1.1])
    beta = np.array([0.4])
    info = inference.fisher_information(design, psi)
    sigma = build_sigma(design, psi)
    chol = np.linalg.cholesky(sigma)
    reps = 40000
    scores = np.empty((reps, design.r))
    for b in range(reps):
        y = design.X @ beta + chol @ rng.standard_normal(design.n)
        scores[b] = inference.score(design, y, Parameter(psi=psi, beta=beta)).score_psi
    cov = np.cov(scores.T)
    se = np.std(scores[:, :, None] * scores[:, None, :], axis=0) / np.sqrt(reps)
    assert np.all(np.abs(cov - info.info_psi) < 6 * se)


def test_identifiability_detector():
    rng = np.random.default_rng(13)
    design = make_design(rng, "cluster")
    assert inference.information_positive_definite(design)
    # Z Z' proportional to the identity makes psi_1 and psi_r collinear
    degenerate = LmmDesign(X=np.zeros((4, 0)), Z=np.eye(4),
                           structure=CovarianceStructure.iid(4))
    assert not inference.information_positive_definite(degenerate)
    info = inference.fisher_information(degenerate, [1.0, 1.0]).info_psi
    assert np.linalg.eigvalsh(info)[0] < 1e-8


def test_score_statistic_known_beta_vs_profile():
    rng = np.random.default_rng(14)
    design = make_design(rng, "crossed", n=4, p=1)
    psi = np.array([0.5, 0.4, 1.0])
    y = rng.standard_normal(design.n)
    w, t = inference.score_statistic(design, y, Parameter(psi=psi))
    assert t >= 0 and abs(t - w @ w) < 1e-12
    t_prof = inference.profile_score_statistic(design, y, psi)
    assert t_prof >= 0


def test_gls_beta_matches_direct_solve():
    rng = np.random.default_rng(15)
    design = make_design(rng, "iid", n=10, p=3)
    psi = np.array([0.3, 0.9])
    y = rng.standard_normal(10)
    sigma_inv = np.linalg.inv(build_sigma(design, psi))
    direct = np.linalg.solve(design.X.T @ sigma_inv @ design.X,
                             design.X.T @ sigma_inv @ y)
    np.testing.assert_allclose(inference.gls_beta(design, y, psi), direct,
                               atol=1e-10)


def test_wald_statistic_quadratic_form():
    info = np.array([[2.0, 0.5], [0.5, 1.0]])
    val = inference.wald_statistic([1.0, 1.0], [1.5, 0.5], info)
    d = np.array([0.5, -0.5])
    assert abs(val - d @ info @ d) < 1e-14


def test_lrt_zero_at_maximizer_and_rejects_bad_hat():
    rng = np.random.default_rng(16)
    design = make_design(rng, "iid", n=8, p=0)
    y = rng.standard_normal(8)
    psi = np.array([0.5, 1.0])
    theta = Parameter(psi=psi)
    assert inference.lrt_statistic(design, y, psi, theta) == 0.0
    # theta_hat strictly worse than the probe must raise
    bad = Parameter(psi=np.array([50.0, 50.0]))
    with pytest.raises(ValueError):
        inference.lrt_statistic(design, y, psi, bad)


def test_statistic_kind_parse():
    assert StatisticKind.parse("rscr") is StatisticKind.RestrictedScore
    assert StatisticKind.parse("wald") is StatisticKind.Wald
    assert StatisticKind.parse("LikelihoodRatio") is StatisticKind.LikelihoodRatio
    with pytest.raises(ValueError):
        StatisticKind.parse("nope")
