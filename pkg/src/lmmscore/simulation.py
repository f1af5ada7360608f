"""Seeded scenario generators and Monte Carlo coverage/quantile harnesses.

Scenarios fix the design once (X, Z, beta drawn from a dedicated "design"
stream) and redraw y for each replication from its own counter-based stream keyed by
hash(seed, replication, purpose), so results are bit-identical regardless of
evaluation order or worker count.

Coverage is of the TRUE parameter: for each probe psi the data are generated
at that psi and membership of the confidence region is tested at the same
psi.  Wald and likelihood-ratio probes share one fit per replication.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import crossed as crossed_mod
from . import kernels
from .inference import StatisticKind
from .model import CovarianceStructure, LmmDesign, Parameter, build_psi
from .regions import chi2_quantile

DEFAULT_COVERAGE_REPS = 2000
DEFAULT_QUANTILE_REPS = 10000
CHUNK_REPS = 1000
LRT_CLAMP = 1e-8


def rep_stream(seed: int, purpose: str, rep: int | None = None) -> np.random.Generator:
    """Independent counter-based stream keyed by hash(seed, purpose, rep)."""
    label = f"{seed}|{purpose}|{'design' if rep is None else rep}"
    digest = hashlib.blake2b(label.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class Scenario:
    """One of the four experimental settings; shape fields unused by a kind
    stay at their defaults.  ``psi`` is the generating parameter (example1
    stores the scalar excess variance as a length-1 tuple)."""

    kind: str
    seed: int
    psi: tuple
    n: int = 0
    m: int = 0
    cluster_size: int = 0
    p: int = 0
    factor_sizes: tuple = ()

    @staticmethod
    def example1(n: int, psi: float = 1.0, seed: int = 0) -> "Scenario":
        if n < 1 or psi < 0:
            raise ValueError("need n >= 1 and psi >= 0")
        return Scenario(kind="example1", seed=seed, psi=(float(psi),), n=int(n))

    @staticmethod
    def figure1_cluster(seed: int = 0, m: int = 50, cluster_size: int = 5) -> "Scenario":
        return Scenario(kind="figure1-cluster", seed=seed,
                        psi=(1e-3, 0.0, 1e-3, 1.0), m=int(m),
                        cluster_size=int(cluster_size))

    @staticmethod
    def correlated_clusters(m: int, cluster_size: int = 3, p: int = 2,
                            psi=(1.0, 0.0, 1.0, 1.0), seed: int = 0) -> "Scenario":
        if p < 2:
            raise ValueError("the random slope uses X_{ij2}: need p >= 2")
        return Scenario(kind="correlated-clusters", seed=seed,
                        psi=tuple(float(v) for v in psi), m=int(m),
                        cluster_size=int(cluster_size), p=int(p))

    @staticmethod
    def crossed_intercepts(n1: int, n2: int, p: int = 2,
                           psi=(1.0, 1.0, 1.0), seed: int = 0) -> "Scenario":
        if p < 1:
            raise ValueError("need at least the intercept column")
        return Scenario(kind="crossed-intercepts", seed=seed,
                        psi=tuple(float(v) for v in psi), p=int(p),
                        factor_sizes=(int(n1), int(n2)))

    def probe_vector(self, t: float) -> np.ndarray:
        """Map a scalar probe coordinate to a full psi vector: the excess
        variance (example1), the random-effect correlation psi_2 with unit
        variances (clusters), or the common factor variance (crossed)."""
        if self.kind == "example1":
            return np.array([t])
        if self.kind == "correlated-clusters":
            return np.array([1.0, t, 1.0, 1.0])
        if self.kind == "crossed-intercepts":
            return np.array([t, t, 1.0])
        if self.kind == "figure1-cluster":
            base = np.array(self.psi)
            base[0] = base[2] = t
            return base
        raise ValueError(f"unknown scenario kind {self.kind!r}")

    def default_probes(self) -> list:
        if self.kind == "correlated-clusters":
            return [-0.99, -0.9, 0.0, 0.9, 0.99]
        if self.kind == "crossed-intercepts":
            return [0.0, 0.01, 0.1, 1.0]
        if self.kind == "example1":
            return [0.0, 0.1, 1.0]
        return [self.psi[0]]


# ---------------------------------------------------------------------------
# Engines: scenario-specific simulation + batched statistic evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchFitOptions:
    max_iter: int = 500
    tol: float = 1e-8
    starts: int = 3
    psi_r_floor_factor: float = 1e-10


def _psd_factor(mat: np.ndarray) -> np.ndarray:
    """L with L L' = mat for PSD mat (eigendecomposition; boundary safe)."""
    lam, vec = np.linalg.eigh(mat)
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def _batch_fit(kernel, ys, y_var: np.ndarray, reml: bool,
               options: BatchFitOptions, psd_block: bool,
               warm_start: np.ndarray | None = None):
    """Best-of-starts batched maximization of the (restricted) likelihood.

    Returns (psi_hat (B, r), loglik (B,), converged (B,)).  The psi_r floor
    is a shared scalar 1e-10 * median per-replication sample variance.

    ``warm_start`` adds one start at a fixed psi (the generating/probe value
    in Monte Carlo use); when the data were generated there it usually lies
    in the right basin, and for likelihood-ratio statistics it guarantees
    loglik_hat >= loglik(probe).
    """
    nrep = y_var.shape[0]
    r = kernel.r
    floor = options.psi_r_floor_factor * max(float(np.median(y_var)), 1e-12)

    def project(x):
        out = np.array(x, dtype=float)
        if psd_block:
            out[:, :-1] = kernels.clip_psd_2x2_vech(out[:, :-1])
        else:
            out[:, :-1] = np.maximum(out[:, :-1], 0.0)
        out[:, -1] = np.maximum(out[:, -1], floor)
        return out

    def value_and_grad(x, idx):
        ys_sub = _slice_ystats(ys, idx)
        return kernel.loglik_grad(x, ys_sub, reml=reml)

    def value_fn(x, idx):
        ys_sub = _slice_ystats(ys, idx)
        return kernel.loglik_grad(x, ys_sub, reml=reml, value_only=True)[0]

    diag = np.ones(r - 1)
    if psd_block:
        diag[1] = 0.0  # off-diagonal block entry starts at zero
    scales = [(0.5, 0.5), (1.0, 1.0), (1e-4, 1.0)][: max(options.starts, 1)]
    start_points = []
    if warm_start is not None:
        start_points.append(np.broadcast_to(
            np.asarray(warm_start, dtype=float), (nrep, r)))
        scales = scales[: max(options.starts - 1, 0)]
    for diag_scale, err_scale in scales:
        x0 = np.empty((nrep, r))
        x0[:, :-1] = diag[None, :] * (diag_scale * y_var[:, None])
        x0[:, -1] = err_scale * y_var
        start_points.append(x0)
    best = None
    for x0 in start_points:
        x, f, conv, _, _ = kernels.batched_projected_ascent(
            value_and_grad, x0, project, tol=options.tol,
            max_iter=options.max_iter, value_fn=value_fn)
        if best is None:
            best = [x, f, conv]
        else:
            better = f > best[1]
            best[0][better] = x[better]
            best[1][better] = f[better]
            best[2][better] = conv[better]
    if psd_block:
        _polish_singular_block(kernel, ys, reml, options, floor, best)
    return best[0], best[1], best[2]


def _polish_singular_block(kernel, ys, reml, options, floor, best):
    """Refine rows whose fitted 2x2 block is (near) singular.

    Projected gradient ascent crawls along the curved rank-one face of the
    PSD cone, so rows piling up at perfect correlation stop short of the
    constrained maximum.  On that face Psi_1 = v v' is smooth in v, so
    reoptimizing t = (v1, v2, psi_r) with a chain-rule gradient converges
    normally; the result is kept only where it improves the likelihood.
    """
    x, f = best[0], best[1]
    det = x[:, 0] * x[:, 2] - x[:, 1] ** 2
    scale = np.maximum(x[:, 0] * x[:, 2], 1e-12)
    rows = np.where(det <= 1e-6 * scale)[0]
    if rows.size == 0:
        return
    ys_rows = _slice_ystats(ys, rows)

    def to_psi(t):
        psi = np.empty((t.shape[0], 4))
        psi[:, 0] = t[:, 0] ** 2
        psi[:, 1] = t[:, 0] * t[:, 1]
        psi[:, 2] = t[:, 1] ** 2
        psi[:, 3] = t[:, 2]
        return psi

    def pull_grad(t, g_psi):
        g_t = np.empty_like(t)
        g_t[:, 0] = 2 * t[:, 0] * g_psi[:, 0] + t[:, 1] * g_psi[:, 1]
        g_t[:, 1] = t[:, 0] * g_psi[:, 1] + 2 * t[:, 1] * g_psi[:, 2]
        g_t[:, 2] = g_psi[:, 3]
        return g_t

    def vg(t, idx):
        ft, gt = kernel.loglik_grad(to_psi(t), _slice_ystats(ys_rows, idx),
                                    reml=reml)
        return ft, pull_grad(t, gt)

    def vf(t, idx):
        return kernel.loglik_grad(to_psi(t), _slice_ystats(ys_rows, idx),
                                  reml=reml, value_only=True)[0]

    def project_t(t):
        out = np.array(t, dtype=float)
        out[:, 2] = np.maximum(out[:, 2], floor)
        return out

    t0 = np.empty((rows.size, 3))
    t0[:, 0] = np.sqrt(np.maximum(x[rows, 0], 0.0))
    t0[:, 1] = np.sign(x[rows, 1] + 1e-300) * np.sqrt(np.maximum(x[rows, 2], 0.0))
    t0[:, 2] = x[rows, 3]
    t_hat, f_hat, _, _, _ = kernels.batched_projected_ascent(
        vg, t0, project_t, tol=options.tol, max_iter=options.max_iter,
        value_fn=vf)
    improved = f_hat > f[rows]
    keep = rows[improved]
    x[keep] = to_psi(t_hat)[improved]
    f[keep] = f_hat[improved]


def _slice_ystats(ys, idx):
    if isinstance(ys, kernels.ClusterYStats):
        return kernels.ClusterYStats(zty=ys.zty[idx], xty=ys.xty[idx],
                                     yty=ys.yty[idx])
    return ys[idx]


class _KernelEngine:
    """Shared statistic sampling over a structured kernel.

    Subclasses provide ``simulate(psi, rep_indices)`` returning responses in
    kernel-native layout, plus the kernel itself and the projection shape.
    """

    kernel = None
    psd_block = False
    reml_fits = True

    def __init__(self, scenario: Scenario):
        self.scenario = scenario

    @property
    def df(self) -> int:
        return self.kernel.r

    def simulate(self, psi, rep_indices):  # pragma: no cover - abstract
        raise NotImplementedError

    def prepare(self, y_native):
        raise NotImplementedError

    def sample_statistics(self, psi, kinds, reps: int,
                          fit_options: BatchFitOptions | None = None,
                          chunk: int = CHUNK_REPS) -> dict:
        """Statistic values at the true/probe psi, one array (reps,) per kind."""
        psi = np.asarray(psi, dtype=float)
        kinds = [StatisticKind.parse(k) if isinstance(k, str) else k for k in kinds]
        fit_options = fit_options or BatchFitOptions()
        need_fit = any(k in (StatisticKind.Wald, StatisticKind.LikelihoodRatio)
                       for k in kinds)
        out = {k: [] for k in kinds}
        for start in range(0, reps, chunk):
            idx = np.arange(start, min(start + chunk, reps))
            y_native = self.simulate(psi, idx)
            ys, y_var = self.prepare(y_native)
            score_vals = None
            if any(k in (StatisticKind.Score, StatisticKind.ProfileScore,
                         StatisticKind.RestrictedScore) for k in kinds):
                score_vals = self.kernel.score_statistics(psi[None, :], ys)
            fit = None
            if need_fit:
                fit = _batch_fit(self.kernel, ys, y_var,
                                 reml=self.reml_fits and self.kernel.p > 0,
                                 options=fit_options, psd_block=self.psd_block,
                                 warm_start=psi)
            for k in kinds:
                out[k].append(self._one_kind(k, psi, ys, score_vals, fit))
        return {k: np.concatenate(v) for k, v in out.items()}

    def _one_kind(self, kind, psi, ys, score_vals, fit):
        if kind is StatisticKind.Score:
            if self.kernel.p > 0:
                raise ValueError("known-beta score unavailable with fixed effects")
            return score_vals["t_score"]
        if kind is StatisticKind.ProfileScore:
            key = "t_pscr" if self.kernel.p > 0 else "t_score"
            return score_vals[key]
        if kind is StatisticKind.RestrictedScore:
            key = "t_rscr" if self.kernel.p > 0 else "t_score"
            return score_vals[key]
        psi_hat, loglik_hat, _ = fit
        if kind is StatisticKind.Wald:
            restricted = self.reml_fits and self.kernel.p > 0
            info = self.kernel.information(psi_hat, restricted=restricted)
            diff = psi_hat - psi[None, :]
            return np.einsum("bi,bij,bj->b", diff, info, diff)
        if kind is StatisticKind.LikelihoodRatio:
            reml = self.reml_fits and self.kernel.p > 0
            f0, _ = self.kernel.loglik_grad(psi[None, :], ys, reml=reml)
            t = 2.0 * (loglik_hat - f0)
            t = np.where(t < -LRT_CLAMP, np.nan, np.maximum(t, 0.0))
            return t
        raise ValueError(f"unsupported statistic {kind}")


class ClusterEngine(_KernelEngine):
    """Independent clusters; covers figure1-cluster (p = 0, Bernoulli Z) and
    correlated-clusters (random intercept + slope, X drawn once)."""

    psd_block = True

    def __init__(self, scenario: Scenario):
        super().__init__(scenario)
        rng = rep_stream(scenario.seed, "design")
        m, ni = scenario.m, scenario.cluster_size
        if scenario.kind == "figure1-cluster":
            self.beta = None
            x_blocks = None
            z_blocks = rng.binomial(1, 0.5, size=(m, ni, 2)).astype(float)
        else:
            p = scenario.p
            self.beta = rng.standard_normal(p)
            x_blocks = np.empty((m, ni, p))
            x_blocks[..., 0] = 1.0
            if p > 1:
                x_blocks[..., 1:] = rng.uniform(-1.0, 1.0, size=(m, ni, p - 1))
            z_blocks = x_blocks[..., :2].copy()
        self.z_blocks = z_blocks
        self.x_blocks = x_blocks
        block_hs = np.stack(_block_indicators())
        self.kernel = kernels.ClusterKernel(z_blocks, x_blocks, block_hs)
        self.mean_blocks = (np.einsum("miu,u->mi", x_blocks, self.beta)
                            if x_blocks is not None else 0.0)

    def simulate(self, psi, rep_indices) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        m, ni = self.scenario.m, self.scenario.cluster_size
        psi1 = np.array([[psi[0], psi[1]], [psi[1], psi[2]]])
        factor = _psd_factor(psi1)
        sd_e = math.sqrt(psi[3])
        out = np.empty((len(rep_indices), m, ni))
        for row, rep in enumerate(rep_indices):
            rng = rep_stream(self.scenario.seed, "y", int(rep))
            u = rng.standard_normal((m, 2)) @ factor.T
            e = sd_e * rng.standard_normal((m, ni))
            out[row] = self.mean_blocks + np.einsum(
                "mia,ma->mi", self.z_blocks, u) + e
        return out

    def prepare(self, y_native):
        ys = self.kernel.y_stats(y_native)
        y_var = y_native.reshape(y_native.shape[0], -1).var(axis=1)
        return ys, y_var

    def dense_design(self) -> LmmDesign:
        m, ni = self.scenario.m, self.scenario.cluster_size
        z = np.zeros((m * ni, m * 2))
        for i in range(m):
            z[i * ni:(i + 1) * ni, i * 2:(i + 1) * 2] = self.z_blocks[i]
        x = (self.x_blocks.reshape(m * ni, -1)
             if self.x_blocks is not None else np.zeros((m * ni, 0)))
        return LmmDesign(X=x, Z=z, structure=CovarianceStructure.clustered(m, 2))

    def flatten(self, y_native):
        return y_native.reshape(y_native.shape[0], -1)


def _block_indicators():
    """H_j for one 2x2 vech block: [[1,0],[0,0]], [[0,1],[1,0]], [[0,0],[0,1]]."""
    h1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    h2 = np.array([[0.0, 1.0], [1.0, 0.0]])
    h3 = np.array([[0.0, 0.0], [0.0, 1.0]])
    return (h1, h2, h3)


class CrossedEngine(_KernelEngine):
    """Two crossed random intercepts on an n1 x n2 grid; observation order is
    row-major (i, j) to match the Kronecker design construction."""

    psd_block = False

    def __init__(self, scenario: Scenario):
        super().__init__(scenario)
        self.layout = crossed_mod.CrossedLayout(scenario.factor_sizes)
        rng = rep_stream(scenario.seed, "design")
        p = scenario.p
        n = self.layout.n
        self.beta = rng.standard_normal(p)
        x = np.empty((n, p))
        x[:, 0] = 1.0
        if p > 1:
            x[:, 1:] = rng.uniform(-1.0, 1.0, size=(n, p - 1))
        self.x = x
        self.mean = x @ self.beta
        self.basis = crossed_mod.spectral_basis(self.layout)
        self.kernel = kernels.CrossedKernel(self.basis, x)

    def simulate(self, psi, rep_indices) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        n1, n2 = self.layout.factor_sizes
        sd = np.sqrt(np.maximum(psi, 0.0))
        out = np.empty((len(rep_indices), n1 * n2))
        for row, rep in enumerate(rep_indices):
            rng = rep_stream(self.scenario.seed, "y", int(rep))
            u1 = sd[0] * rng.standard_normal(n1)
            u2 = sd[1] * rng.standard_normal(n2)
            e = sd[2] * rng.standard_normal((n1, n2))
            out[row] = (self.mean.reshape(n1, n2)
                        + u1[:, None] + u2[None, :] + e).ravel()
        return out

    def prepare(self, y_native):
        return self.kernel.rotate(y_native), y_native.var(axis=1)

    def dense_design(self) -> LmmDesign:
        design = crossed_mod.build_crossed_design(self.layout)
        return LmmDesign(X=self.x, Z=design.Z, structure=design.structure)

    def flatten(self, y_native):
        return y_native


class Example1Engine:
    """i.i.d. N(0, 1 + psi) observations with closed-form statistics."""

    df = 1

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.n = scenario.n

    def moments(self, psi: float, rep_indices) -> np.ndarray:
        """M = mean(y^2) per replication."""
        scale = 1.0 + psi
        out = np.empty(len(rep_indices))
        for row, rep in enumerate(rep_indices):
            rng = rep_stream(self.scenario.seed, "y", int(rep))
            z = rng.standard_normal(self.n)
            out[row] = scale * float(z @ z) / self.n
        return out

    def raw_samples(self, psi: float, reps: int) -> dict:
        """Vectorized closed forms: W^S, W^W, T^L, psi_hat arrays."""
        m = self.moments(psi, np.arange(reps))
        n = self.n
        root = math.sqrt(n / 2.0)
        w_score = root * (m / (1.0 + psi) - 1.0)
        psi_hat = np.maximum(m - 1.0, 0.0)
        w_wald = (psi_hat - psi) * root / (1.0 + psi)
        def ll(p):
            return -0.5 * n * (np.log1p(p) + m / (1.0 + p))
        t_lrt = np.maximum(2.0 * (ll(psi_hat) - ll(psi)), 0.0)
        return {"w_score": w_score, "w_wald": w_wald, "t_lrt": t_lrt,
                "psi_hat": psi_hat, "moment": m}

    def sample_statistics(self, psi, kinds, reps: int,
                          fit_options=None, chunk: int = CHUNK_REPS) -> dict:
        psi = float(np.atleast_1d(psi)[0])
        kinds = [StatisticKind.parse(k) if isinstance(k, str) else k for k in kinds]
        raw = self.raw_samples(psi, reps)
        out = {}
        for k in kinds:
            if k in (StatisticKind.Score, StatisticKind.ProfileScore,
                     StatisticKind.RestrictedScore):
                out[k] = raw["w_score"] ** 2
            elif k is StatisticKind.Wald:
                out[k] = raw["w_wald"] ** 2
            elif k is StatisticKind.LikelihoodRatio:
                out[k] = raw["t_lrt"]
            else:
                raise ValueError(f"unsupported statistic {k}")
        return out


_ENGINE_CACHE: dict = {}


def build_engine(scenario: Scenario):
    if scenario not in _ENGINE_CACHE:
        if scenario.kind == "example1":
            engine = Example1Engine(scenario)
        elif scenario.kind in ("figure1-cluster", "correlated-clusters"):
            engine = ClusterEngine(scenario)
        elif scenario.kind == "crossed-intercepts":
            engine = CrossedEngine(scenario)
        else:
            raise ValueError(f"unknown scenario kind {scenario.kind!r}")
        _ENGINE_CACHE[scenario] = engine
    return _ENGINE_CACHE[scenario]


def simulate_dataset(scenario: Scenario, replication_index: int):
    """(design, y, true parameter) for one replication; the design is fixed
    across replications and y is deterministic given (seed, replication)."""
    engine = build_engine(scenario)
    psi = np.array(scenario.psi)
    if scenario.kind == "example1":
        rng = rep_stream(scenario.seed, "y", int(replication_index))
        y = math.sqrt(1.0 + psi[0]) * rng.standard_normal(scenario.n)
        structure = CovarianceStructure.error_only()
        design = LmmDesign(X=np.zeros((scenario.n, 0)),
                           Z=np.zeros((scenario.n, 0)), structure=structure)
        return design, y, Parameter(psi=np.array([1.0 + psi[0]]))
    y_native = engine.simulate(psi, [replication_index])
    y = engine.flatten(y_native)[0]
    design = engine.dense_design()
    beta = getattr(engine, "beta", None)
    return design, y, Parameter(psi=psi, beta=beta)


# ---------------------------------------------------------------------------
# Coverage and quantile harnesses
# ---------------------------------------------------------------------------


@dataclass
class CoverageRow:
    probe: float
    statistic: str
    coverage: float
    se: float
    reps: int
    failures: int


@dataclass
class CoverageTable:
    scenario: Scenario
    alpha: float
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario", "probe", "statistic", "coverage",
                             "se", "reps", "failures"])
            for row in self.rows:
                writer.writerow([self.scenario.kind, row.probe, row.statistic,
                                 f"{row.coverage:.6f}", f"{row.se:.6f}",
                                 row.reps, row.failures])


def coverage_experiment(scenario: Scenario, psi_probe_grid, statistics,
                        reps: int = DEFAULT_COVERAGE_REPS, alpha: float = 0.05,
                        fit_options: BatchFitOptions | None = None) -> CoverageTable:
    """Empirical coverage of the true parameter along a probe grid.

    Each probe is both the generating psi and the tested point.  Statistic
    failures (non-finite values) are counted per cell, not raised; coverage is
    the covered fraction among successful replications.
    """
    if reps < 100:
        raise ValueError("need at least 100 replications")
    engine = build_engine(scenario)
    table = CoverageTable(scenario=scenario, alpha=alpha)
    crit = chi2_quantile(engine.df, 1.0 - alpha)
    kinds = [StatisticKind.parse(k) if isinstance(k, str) else k
             for k in statistics]
    for t in psi_probe_grid:
        psi = scenario.probe_vector(float(t))
        samples = engine.sample_statistics(psi, kinds, reps,
                                           fit_options=fit_options)
        for k in kinds:
            vals = samples[k]
            good = np.isfinite(vals)
            failures = int(reps - good.sum())
            covered = float(np.mean(vals[good] <= crit)) if good.any() else 0.0
            se = math.sqrt(covered * (1.0 - covered) / reps)
            table.rows.append(CoverageRow(probe=float(t), statistic=k.value,
                                          coverage=covered, se=se, reps=reps,
                                          failures=failures))
    return table


@dataclass
class QuantileRow:
    level: float
    statistic: str
    empirical: float
    reference: float


def quantile_curves(scenario: Scenario, statistics,
                    reps: int = DEFAULT_QUANTILE_REPS, probe_psi=None,
                    levels=None,
                    fit_options: BatchFitOptions | None = None) -> list:
    """Empirical quantiles of each statistic at the true psi against the
    chi-squared reference with df = number of variance parameters."""
    if reps < 1000:
        raise ValueError("need at least 1000 replications")
    engine = build_engine(scenario)
    psi = (np.asarray(probe_psi, dtype=float) if probe_psi is not None
           else np.array(scenario.psi))
    if levels is None:
        levels = np.arange(1, 100) / 100.0
    kinds = [StatisticKind.parse(k) if isinstance(k, str) else k
             for k in statistics]
    samples = engine.sample_statistics(psi, kinds, reps,
                                       fit_options=fit_options)
    rows = []
    refs = {lv: chi2_quantile(engine.df, lv) for lv in levels}
    for k in kinds:
        vals = samples[k]
        vals = vals[np.isfinite(vals)]
        emp = np.quantile(vals, levels)
        for lv, e in zip(levels, emp):
            rows.append(QuantileRow(level=float(lv), statistic=k.value,
                                    empirical=float(e), reference=refs[lv]))
    return rows


def _ks_two_sample(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov distance (no p-value needed here)."""
    x = np.sort(x)
    y = np.sort(y)
    both = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, both, side="right") / x.size
    cdf_y = np.searchsorted(y, both, side="right") / y.size
    return float(np.max(np.abs(cdf_x - cdf_y)))


def proposition1_comparison(n: int, psi_scaled: float, reps: int = 10000,
                            seed: int = 0) -> list:
    """Local-alternative comparison table for the single-variance model.

    Data are generated at psi = a / sqrt(n) with a = psi_scaled.  Each
    statistic is compared (two-sample KS) with draws of its limiting law:
    W^S -> N(0, 1), W^W -> max(W, -a 2^{-1/2}), and the likelihood ratio
    T^L -> 2 W max(W, -a 2^{-1/2}) - max(W, -a 2^{-1/2})^2 for W ~ N(0, 1).
    Returns rows of (statistic, ks_to_limit) plus the boundary frequency
    P(psi_hat = 0).
    """
    if psi_scaled < 0:
        raise ValueError("psi_scaled must be nonnegative")
    a = float(psi_scaled)
    psi = a / math.sqrt(n)
    scenario = Scenario.example1(n=n, psi=psi, seed=seed)
    engine = build_engine(scenario)
    raw = engine.raw_samples(psi, reps)
    w = rep_stream(seed, "limit").standard_normal(reps)
    m_lim = np.maximum(w, -a / math.sqrt(2.0))
    limits = {
        "w_score": w,
        "w_wald": m_lim,
        "t_lrt": 2.0 * w * m_lim - m_lim**2,
    }
    rows = [(name, _ks_two_sample(raw[name], limits[name]))
            for name in ("w_score", "w_wald", "t_lrt")]
    boundary = float(np.mean(raw["psi_hat"] == 0.0))
    return {"psi": psi, "rows": rows, "boundary_frequency": boundary}


def write_quantile_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "statistic", "empirical", "reference"])
        for row in rows:
            writer.writerow([row.level, row.statistic,
                             f"{row.empirical:.8f}", f"{row.reference:.8f}"])
