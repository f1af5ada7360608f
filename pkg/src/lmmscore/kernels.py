"""Structure-exploiting evaluation kernels for the simulation harness.

The generic inference module forms dense n x n matrices, which is fine for
library calls but far too slow for Monte Carlo experiments with thousands of
replications at n in the hundreds or thousands.  The two kernels here compute
exactly the same scores, information matrices, and likelihoods:

* ClusterKernel: block-diagonal Sigma with per-cluster blocks
  Z_i Psi_1 Z_i' + psi_r I.  All quantities reduce, via the push-through
  identity (psi_r I + Z Psi Z')^{-1} = {I - Z Psi (psi_r I + Z'Z Psi)^{-1} Z'}
  / psi_r, to algebra on q1 x q1 sufficient statistics Z'Z, Z'X, X'X, Z'y.

* CrossedKernel: Sigma diagonal in the fixed spectral basis of the crossed
  projections, so everything is elementwise in n.

Fixed effects enter through the REML projection identity
Pi = Sigma^{-1} - W C W' with W = Sigma^{-1} X and C = (X' Sigma^{-1} X)^{-1}:
restricted scores are S~_j = {y'Pi dSigma_j Pi y - tr(Pi dSigma_j)} / 2 and
the restricted information is tr(Pi dSigma_i Pi dSigma_j) / 2, both invariant
to the choice of REML basis.  The test suite checks every kernel output
against the dense modules on small instances.

All methods are batched: ``psi`` has shape (B, r) and responses (B, ...); a
psi batch of size one broadcasts across replications.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _bc(arr: np.ndarray, b: int) -> np.ndarray:
    """Broadcast the leading batch axis to size b (stride-0 view)."""
    if arr.shape[0] == b:
        return arr
    return np.broadcast_to(arr, (b,) + arr.shape[1:])


def restricted_info_from_parts(t2, c_mat, n_blocks, m_blocks):
    """I~_ij = {t2_ij - tr(C N_ij) - tr(C N_ij') + tr(C M_i C M_j)} / 2.

    t2: (B, r, r) traces tr(Sigma^{-1} dS_i Sigma^{-1} dS_j);
    n_blocks: (B, r, r, p, p) with N_ij = W' dS_i Sigma^{-1} dS_j W;
    m_blocks: (B, r, p, p) with M_i = W' dS_i W.
    """
    corr1 = np.einsum("buv,bijvu->bij", c_mat, n_blocks)
    corr1 = corr1 + np.einsum("buv,bijuv->bij", c_mat, n_blocks)
    cm = np.einsum("buv,bivw->biuw", c_mat, m_blocks)
    corr2 = np.einsum("biuw,bjwu->bij", cm, cm)
    info = 0.5 * (t2 - corr1 + corr2)
    return 0.5 * (info + np.swapaxes(info, 1, 2))


# ---------------------------------------------------------------------------
# Independent clusters
# ---------------------------------------------------------------------------


@dataclass
class ClusterYStats:
    """Per-replication, per-cluster response cross-products."""

    zty: np.ndarray  # (B, m, q1)
    xty: np.ndarray  # (B, m, p)
    yty: np.ndarray  # (B, m)


class ClusterKernel:
    """Fast path for m independent clusters of equal size with shared Psi_1.

    ``z_blocks`` is (m, ni, q1); ``x_blocks`` is (m, ni, p) or None for a
    known-zero mean; ``indicators`` is the (r-1, q1, q1) stack of the
    block-level derivative matrices H_j.
    """

    def __init__(self, z_blocks: np.ndarray, x_blocks: np.ndarray | None,
                 indicators: np.ndarray):
        self.zb = np.asarray(z_blocks, dtype=float)
        self.m, self.ni, self.q1 = self.zb.shape
        self.hs = np.asarray(indicators, dtype=float)
        self.r = self.hs.shape[0] + 1
        self.ztz = np.einsum("mia,mic->mac", self.zb, self.zb)
        if x_blocks is not None:
            self.xb = np.asarray(x_blocks, dtype=float)
            self.p = self.xb.shape[2]
            self.ztx = np.einsum("mia,miu->mau", self.zb, self.xb)
            self.xtx = np.einsum("miu,miv->muv", self.xb, self.xb)
            # |V' Sigma V| = |Sigma| |X' Sigma^{-1} X| / |X'X|: this constant
            # aligns the restricted likelihood with the reduced-model one.
            self.half_logdet_xtx = 0.5 * np.linalg.slogdet(self.xtx.sum(axis=0))[1]
        else:
            self.xb = None
            self.p = 0
            self.half_logdet_xtx = 0.0

    # -- data plumbing ------------------------------------------------------

    def y_stats(self, y_blocks: np.ndarray) -> ClusterYStats:
        """Cross-products for responses of shape (B, m, ni)."""
        y_blocks = np.asarray(y_blocks, dtype=float)
        zty = np.einsum("mia,bmi->bma", self.zb, y_blocks)
        xty = (np.einsum("miu,bmi->bmu", self.xb, y_blocks)
               if self.p > 0 else np.zeros(y_blocks.shape[:2] + (0,)))
        yty = np.einsum("bmi,bmi->bm", y_blocks, y_blocks)
        return ClusterYStats(zty=zty, xty=xty, yty=yty)

    def psi1(self, psi: np.ndarray) -> np.ndarray:
        """(B, q1, q1) block covariance from the parameter batch."""
        return np.einsum("jac,bj->bac", self.hs, psi[:, :-1])

    # -- psi-only core ------------------------------------------------------

    def core(self, psi: np.ndarray, with_info: bool = False) -> dict:
        """All response-free quantities at each psi in the batch."""
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        b = psi.shape[0]
        q1, r, p = self.q1, self.r, self.p
        p4 = psi[:, -1]
        if np.any(p4 <= 0):
            raise ValueError("error variance must be positive")
        psi1 = self.psi1(psi)
        eye = np.eye(q1)
        # batched small-matrix products go through matmul (BLAS) rather than
        # einsum; the (B, m, q1, q1) stacks dominate the fit runtime
        t_mat = p4[:, None, None, None] * eye + self.ztz[None] @ psi1[:, None]
        inv_t = np.linalg.inv(t_mat)
        g = psi1[:, None] @ inv_t
        g = 0.5 * (g + np.swapaxes(g, 2, 3))
        sign, logdet_t = np.linalg.slogdet(t_mat)
        if np.any(sign <= 0):
            raise ValueError("cluster covariance block not positive definite")
        logdet = self.m * (self.ni - q1) * np.log(p4) + logdet_t.sum(axis=1)
        gz = g @ self.ztz[None]
        ez = (eye - gz) / p4[:, None, None, None]
        j_mat = self.ztz[None] @ ez
        j_mat = 0.5 * (j_mat + np.swapaxes(j_mat, 2, 3))
        tr_gz = np.einsum("bmaa->bm", gz)
        t1 = np.empty((b, r))
        t1[:, :-1] = np.einsum("jac,bca->bj", self.hs, j_mat.sum(axis=1))
        t1[:, -1] = ((self.ni - tr_gz) / p4[:, None]).sum(axis=1)
        core = {
            "psi": psi, "p4": p4, "g": g, "ez": ez, "j": j_mat,
            "logdet": logdet, "t1": t1, "b": b,
        }
        if p > 0:
            xtz = np.swapaxes(self.ztx, 1, 2)
            s_gx = g @ self.ztx[None]
            k_mat = np.swapaxes(ez, 2, 3) @ self.ztx[None]
            term_a = xtz[None] @ s_gx
            ax = (self.xtx[None] - term_a).sum(axis=1) / p4[:, None, None]
            ax = 0.5 * (ax + np.swapaxes(ax, 1, 2))
            sign_ax, logdet_ax = np.linalg.slogdet(ax)
            if np.any(sign_ax <= 0):
                raise ValueError("X' Sigma^{-1} X not positive definite")
            c_mat = np.linalg.inv(ax)
            term_c = np.swapaxes(s_gx, 2, 3) @ self.ztz[None] @ s_gx
            x2_c = (self.xtx[None] - term_a - np.swapaxes(term_a, 2, 3)
                    + term_c) / (p4**2)[:, None, None, None]
            x2 = x2_c.sum(axis=1)
            # sum_m k' H_j k as one GEMM per j: stack the cluster axis into
            # the contraction dimension
            hk = self.hs[None, None] @ k_mat[:, :, None]
            k_flat = k_mat.reshape(b, self.m * q1, p)
            hk_flat = np.swapaxes(hk, 1, 2).reshape(b, r - 1, self.m * q1, p)
            m_blocks = np.empty((b, r, p, p))
            m_blocks[:, :-1] = np.swapaxes(k_flat, 1, 2)[:, None] @ hk_flat
            m_blocks[:, -1] = x2
            core.update(s_gx=s_gx, k=k_mat, ax=ax, c=c_mat, x2=x2,
                        x2_c=x2_c, logdet_ax=logdet_ax, m_blocks=m_blocks)
        if with_info:
            core.update(self._info_parts(core))
        return core

    def _info_parts(self, core) -> dict:
        b, r, p = core["b"], self.r, self.p
        p4, g, ez, j_mat = core["p4"], core["g"], core["ez"], core["j"]
        q1 = self.q1
        gz = g @ self.ztz[None]
        j2 = np.swapaxes(ez, 2, 3) @ self.ztz[None] @ ez
        # tr(H_i J H_j J) summed over clusters as a single GEMM: contract
        # the flattened (cluster, q1, q1) axis of H J against itself
        hj = self.hs[None, None] @ j_mat[:, :, None]
        hj_a = np.swapaxes(hj, 1, 2).reshape(b, r - 1, self.m * q1 * q1)
        hj_b = np.swapaxes(np.swapaxes(hj, 3, 4), 1, 2).reshape(
            b, r - 1, self.m * q1 * q1)
        t2 = np.empty((b, r, r))
        t2[:, :-1, :-1] = hj_a @ np.swapaxes(hj_b, 1, 2)
        cross = np.einsum("jac,bca->bj", self.hs, j2.sum(axis=1))
        t2[:, :-1, -1] = cross
        t2[:, -1, :-1] = cross
        t2[:, -1, -1] = ((self.ni - 2 * tr_of(gz)
                          + np.einsum("bmac,bmca->bm", gz, gz))
                         / p4[:, None]**2).sum(axis=1)
        parts = {"t2": t2}
        if p > 0:
            k_mat, c_mat = core["k"], core["c"]
            k2 = np.swapaxes(ez, 2, 3) @ k_mat
            x3 = ((core["x2_c"] - np.swapaxes(k_mat, 2, 3) @ g @ k_mat)
                  / p4[:, None, None, None]).sum(axis=1)
            # k' H_i J H_j k: left factors k' H_i J, right factors H_j k;
            # flatten (cluster, q1) into the contracted axis
            kth = np.swapaxes(k_mat, 2, 3)[:, :, None] @ self.hs[None, None]
            left = np.swapaxes(kth @ j_mat[:, :, None], 1, 2).reshape(
                b, r - 1, self.m, p, q1)
            right = np.swapaxes(self.hs[None, None] @ k_mat[:, :, None],
                                1, 2).reshape(b, r - 1, self.m, q1, p)
            left_f = np.swapaxes(left, 2, 3).reshape(b, r - 1, p, self.m * q1)
            right_f = right.reshape(b, r - 1, self.m * q1, p)
            n_blocks = np.empty((b, r, r, p, p))
            n_blocks[:, :-1, :-1] = left_f[:, :, None] @ right_f[:, None]
            mixed = (kth @ k2[:, :, None]).sum(axis=1)
            n_blocks[:, :-1, -1] = mixed
            n_blocks[:, -1, :-1] = np.swapaxes(mixed, 2, 3)
            n_blocks[:, -1, -1] = x3
            parts.update(k2=k2, n_blocks=n_blocks,
                         info_restricted=restricted_info_from_parts(
                             t2, c_mat, n_blocks, core["m_blocks"]))
        return parts

    # -- response-dependent pieces ------------------------------------------

    def _projected(self, core, ys: ClusterYStats) -> dict:
        """u = Pi y quantities; with p = 0 this is u = Sigma^{-1} y."""
        b = max(core["b"], ys.zty.shape[0])
        p4 = _bc(core["p4"], b)
        g = _bc(core["g"], b)
        ez = _bc(core["ez"], b)
        zty, yty = _bc(ys.zty, b), _bc(ys.yty, b)
        gy = (g @ zty[..., None])[..., 0]
        zy = (np.swapaxes(ez, 2, 3) @ zty[..., None])[..., 0]
        zty_gy = (zty * gy).sum(axis=2)
        ztz_gy = (self.ztz[None] @ gy[..., None])[..., 0]
        yy1 = ((yty - zty_gy) / p4[:, None]).sum(axis=1)
        yy2_c = (yty - 2 * zty_gy + (gy * ztz_gy).sum(axis=2)) \
            / p4[:, None]**2
        out = {"b": b, "zy": zy, "yy1": yy1, "yy2": yy2_c.sum(axis=1)}
        if self.p > 0:
            xty = _bc(ys.xty, b)
            s_gx = _bc(core["s_gx"], b)
            c_mat = _bc(core["c"], b)
            k_mat = _bc(core["k"], b)
            xtz_gy = (np.swapaxes(self.ztx, 1, 2)[None] @ gy[..., None])[..., 0]
            xy = (xty - xtz_gy) / p4[:, None, None]
            xy_tot = xy.sum(axis=1)
            sgx_t = np.swapaxes(s_gx, 2, 3)
            xy2 = ((xty - xtz_gy
                    - (sgx_t @ zty[..., None])[..., 0]
                    + (sgx_t @ ztz_gy[..., None])[..., 0])
                   / p4[:, None, None]**2).sum(axis=1)
            cvec = (c_mat @ xy_tot[..., None])[..., 0]
            zu = zy - (k_mat @ cvec[:, None, :, None])[..., 0]
            x2 = _bc(core["x2"], b)
            uu = (out["yy2"] - 2 * np.einsum("bu,bu->b", xy2, cvec)
                  + np.einsum("bu,buv,bv->b", cvec, x2, cvec))
            out.update(xy_tot=xy_tot, cvec=cvec, zu=zu, uu=uu)
        else:
            out.update(zu=zy, uu=out["yy2"], xy_tot=None, cvec=None)
        return out

    def quad_forms(self, core, ys: ClusterYStats) -> np.ndarray:
        """(B, r) quadratic forms u' dSigma_j u with u = Pi y."""
        proj = self._projected(core, ys)
        b = proj["b"]
        zu = proj["zu"]
        # sum_m zu' H_j zu factors through the (q1, q1) Gram of zu
        gram = np.swapaxes(zu, 1, 2) @ zu
        quads = np.empty((b, self.r))
        quads[:, :-1] = np.einsum("jac,bac->bj", self.hs, gram)
        quads[:, -1] = proj["uu"]
        return quads, proj

    # -- public evaluations ---------------------------------------------------

    def loglik_grad(self, psi, ys: ClusterYStats, reml: bool,
                    value_only: bool = False) -> tuple:
        """(log-likelihood, score) per replication; beta profiled when p > 0.

        reml=True adds the -log|X' Sigma^{-1} X|/2 term and uses the
        restricted score (the exact gradient of the restricted likelihood).
        value_only=True skips the score computation and returns (f, None);
        the likelihood value needs far less per-cluster algebra, which the
        backtracking line search exploits.
        """
        if value_only:
            return self._loglik_value(psi, ys, reml), None
        core = self.core(psi)
        quads, proj = self.quad_forms(core, ys)
        b = proj["b"]
        t1 = _bc(core["t1"], b)
        logdet = _bc(core["logdet"], b)
        if self.p > 0:
            quad_y = proj["yy1"] - np.einsum("bu,bu->b", proj["xy_tot"], proj["cvec"])
        else:
            quad_y = proj["yy1"]
        if reml:
            if self.p == 0:
                raise ValueError("REML requires fixed effects")
            c_mat = _bc(core["c"], b)
            m_blocks = _bc(core["m_blocks"], b)
            tr_pi = t1 - np.einsum("buv,bjvu->bj", c_mat, m_blocks)
            f = (self.half_logdet_xtx
                 - 0.5 * (logdet + _bc(core["logdet_ax"], b) + quad_y))
            grad = 0.5 * (quads - tr_pi)
        else:
            f = -0.5 * (logdet + quad_y)
            grad = 0.5 * (quads - t1)
        return f, grad

    def _loglik_value(self, psi, ys: ClusterYStats, reml: bool) -> np.ndarray:
        """Likelihood values only: the minimal subset of the core algebra."""
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        p4 = psi[:, -1]
        if np.any(p4 <= 0):
            raise ValueError("error variance must be positive")
        psi1 = self.psi1(psi)
        q1 = self.q1
        t_mat = p4[:, None, None, None] * np.eye(q1) \
            + self.ztz[None] @ psi1[:, None]
        inv_t = np.linalg.inv(t_mat)
        g = psi1[:, None] @ inv_t
        g = 0.5 * (g + np.swapaxes(g, 2, 3))
        sign, logdet_t = np.linalg.slogdet(t_mat)
        if np.any(sign <= 0):
            raise ValueError("cluster covariance block not positive definite")
        logdet = self.m * (self.ni - q1) * np.log(p4) + logdet_t.sum(axis=1)
        b = max(psi.shape[0], ys.zty.shape[0])
        p4b, gb = _bc(p4, b), _bc(g, b)
        zty, yty = _bc(ys.zty, b), _bc(ys.yty, b)
        gy = (gb @ zty[..., None])[..., 0]
        quad_y = ((yty - (zty * gy).sum(axis=2))
                  / p4b[:, None]).sum(axis=1)
        logdet = _bc(logdet, b)
        if self.p == 0:
            if reml:
                raise ValueError("REML requires fixed effects")
            return -0.5 * (logdet + quad_y)
        xtz = np.swapaxes(self.ztx, 1, 2)
        s_gx = gb @ self.ztx[None]
        ax = (self.xtx[None] - xtz[None] @ s_gx
              ).sum(axis=1) / p4b[:, None, None]
        ax = 0.5 * (ax + np.swapaxes(ax, 1, 2))
        sign_ax, logdet_ax = np.linalg.slogdet(ax)
        if np.any(sign_ax <= 0):
            raise ValueError("X' Sigma^{-1} X not positive definite")
        xty = _bc(ys.xty, b)
        xy_tot = ((xty - (xtz[None] @ gy[..., None])[..., 0])
                  / p4b[:, None, None]).sum(axis=1)
        cvec = np.linalg.solve(ax, xy_tot[..., None])[..., 0]
        quad_y = quad_y - np.einsum("bu,bu->b", xy_tot, cvec)
        if reml:
            return (self.half_logdet_xtx
                    - 0.5 * (logdet + logdet_ax + quad_y))
        return -0.5 * (logdet + quad_y)

    def score_statistics(self, psi, ys: ClusterYStats) -> dict:
        """Known-beta score, profile score, and restricted score statistics.

        Returns a dict with 't_score' (p = 0 only), 't_pscr' and 't_rscr'
        (p > 0 only), each of shape (B,).
        """
        core = self.core(psi, with_info=True)
        quads, proj = self.quad_forms(core, ys)
        b = proj["b"]
        t1 = _bc(core["t1"], b)
        t2 = _bc(core["t2"], b)
        out = {}
        if self.p == 0:
            s_vec = 0.5 * (quads - t1)
            out["t_score"] = _quad_stat(s_vec, 0.5 * t2)
        else:
            s_prof = 0.5 * (quads - t1)
            out["t_pscr"] = _quad_stat(s_prof, 0.5 * t2)
            c_mat = _bc(core["c"], b)
            m_blocks = _bc(core["m_blocks"], b)
            tr_pi = t1 - np.einsum("buv,bjvu->bj", c_mat, m_blocks)
            s_rest = 0.5 * (quads - tr_pi)
            out["t_rscr"] = _quad_stat(s_rest, _bc(core["info_restricted"], b))
        return out

    def information(self, psi, restricted: bool) -> np.ndarray:
        """(B, r, r) Fisher information; restricted uses the Pi identity."""
        core = self.core(np.atleast_2d(psi), with_info=True)
        if restricted:
            if self.p == 0:
                return 0.5 * core["t2"]
            return core["info_restricted"]
        return 0.5 * core["t2"]

    def whitened_scores(self, psi, ys: ClusterYStats) -> np.ndarray:
        """(B, r) known-beta whitened scores W^S = I^{-1/2} S at a single psi."""
        if self.p != 0:
            raise ValueError("whitened scores implemented for known beta only")
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        if psi.shape[0] != 1:
            raise ValueError("one psi at a time")
        core = self.core(psi, with_info=True)
        quads, proj = self.quad_forms(core, ys)
        s_vec = 0.5 * (quads - _bc(core["t1"], proj["b"]))
        lam, vec = np.linalg.eigh(0.5 * core["t2"][0])
        if lam[0] <= 0:
            raise ValueError("information not positive definite")
        root = (vec / np.sqrt(lam)) @ vec.T
        return s_vec @ root.T


def tr_of(mats: np.ndarray) -> np.ndarray:
    return np.einsum("...aa->...", mats)


def _quad_stat(s_vec: np.ndarray, info: np.ndarray) -> np.ndarray:
    """T = S' I^{-1} S per batch row, NaN where the solve fails."""
    try:
        sol = np.linalg.solve(info, s_vec[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.full_like(s_vec, np.nan)
    return np.einsum("bj,bj->b", s_vec, sol)


# ---------------------------------------------------------------------------
# Crossed random effects (spectral path)
# ---------------------------------------------------------------------------


class CrossedKernel:
    """Diagonalized crossed-design computations in the fixed spectral basis.

    ``scales`` is the (r, n) eigenvalue pattern from crossed.spectral_basis;
    row r-1 is all ones, so the error-variance direction needs no special
    casing.  ``x_hat`` is Q'X (or None for a known-zero mean).
    """

    def __init__(self, basis, x: np.ndarray | None):
        self.basis = basis
        self.scales = basis.scales
        self.r, self.n = self.scales.shape
        if x is not None:
            self.x_hat = basis.Q.T @ np.asarray(x, dtype=float)
            self.p = self.x_hat.shape[1]
            self.half_logdet_xtx = 0.5 * np.linalg.slogdet(
                self.x_hat.T @ self.x_hat)[1]
        else:
            self.x_hat = None
            self.p = 0
            self.half_logdet_xtx = 0.0

    def rotate(self, y: np.ndarray) -> np.ndarray:
        """Q'y for responses of shape (B, n)."""
        return np.asarray(y, dtype=float) @ self.basis.Q

    def eigenvalues(self, psi: np.ndarray) -> np.ndarray:
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        lam = psi @ self.scales
        if np.any(lam <= 0):
            raise ValueError("Sigma(psi) not positive definite on the grid")
        return lam

    def core(self, psi, with_info: bool = False) -> dict:
        psi = np.atleast_2d(np.asarray(psi, dtype=float))
        lam = self.eigenvalues(psi)
        inv = 1.0 / lam
        t1 = np.einsum("jn,bn->bj", self.scales, inv)
        core = {"psi": psi, "lam": lam, "inv": inv, "t1": t1,
                "logdet": np.log(lam).sum(axis=1), "b": psi.shape[0]}
        if self.p > 0:
            ax = np.einsum("nu,bn,nv->buv", self.x_hat, inv, self.x_hat)
            sign, logdet_ax = np.linalg.slogdet(ax)
            if np.any(sign <= 0):
                raise ValueError("X' Sigma^{-1} X not positive definite")
            c_mat = np.linalg.inv(ax)
            m_blocks = np.einsum("nu,jn,bn,nv->bjuv",
                                 self.x_hat, self.scales, inv**2, self.x_hat)
            core.update(ax=ax, c=c_mat, logdet_ax=logdet_ax, m_blocks=m_blocks)
        if with_info:
            t2 = np.einsum("in,bn,jn->bij", self.scales, inv**2, self.scales)
            core["t2"] = t2
            if self.p > 0:
                n_blocks = np.einsum("nu,in,jn,bn,nv->bijuv", self.x_hat,
                                     self.scales, self.scales, inv**3, self.x_hat)
                core["n_blocks"] = n_blocks
                core["info_restricted"] = restricted_info_from_parts(
                    t2, core["c"], n_blocks, core["m_blocks"])
        return core

    def _projected(self, core, y_hat: np.ndarray) -> dict:
        b = max(core["b"], y_hat.shape[0])
        inv = _bc(core["inv"], b)
        y_hat = _bc(y_hat, b)
        if self.p > 0:
            c_mat = _bc(core["c"], b)
            xy = np.einsum("nu,bn,bn->bu", self.x_hat, inv, y_hat)
            cvec = np.einsum("buv,bv->bu", c_mat, xy)
            resid = y_hat - cvec @ self.x_hat.T
        else:
            xy = cvec = None
            resid = y_hat
        u = resid * inv
        return {"b": b, "u": u, "xy": xy, "cvec": cvec, "y_hat": y_hat, "inv": inv}

    def quad_forms(self, core, y_hat) -> tuple:
        proj = self._projected(core, y_hat)
        quads = np.einsum("jn,bn->bj", self.scales, proj["u"]**2)
        return quads, proj

    def loglik_grad(self, psi, y_hat, reml: bool,
                    value_only: bool = False) -> tuple:
        core = self.core(psi)
        quads, proj = self.quad_forms(core, y_hat)
        b = proj["b"]
        logdet = _bc(core["logdet"], b)
        quad_y = np.einsum("bn,bn,bn->b", proj["y_hat"], proj["inv"], proj["y_hat"])
        if self.p > 0:
            quad_y = quad_y - np.einsum("bu,bu->b", proj["xy"], proj["cvec"])
        if reml:
            if self.p == 0:
                raise ValueError("REML requires fixed effects")
            f = (self.half_logdet_xtx
                 - 0.5 * (logdet + _bc(core["logdet_ax"], b) + quad_y))
        else:
            f = -0.5 * (logdet + quad_y)
        if value_only:
            return f, None
        t1 = _bc(core["t1"], b)
        if reml:
            c_mat = _bc(core["c"], b)
            m_blocks = _bc(core["m_blocks"], b)
            tr_pi = t1 - np.einsum("buv,bjvu->bj", c_mat, m_blocks)
            grad = 0.5 * (quads - tr_pi)
        else:
            grad = 0.5 * (quads - t1)
        return f, grad

    def score_statistics(self, psi, y_hat) -> dict:
        core = self.core(psi, with_info=True)
        quads, proj = self.quad_forms(core, y_hat)
        b = proj["b"]
        t1 = _bc(core["t1"], b)
        t2 = _bc(core["t2"], b)
        out = {}
        if self.p == 0:
            out["t_score"] = _quad_stat(0.5 * (quads - t1), 0.5 * t2)
        else:
            out["t_pscr"] = _quad_stat(0.5 * (quads - t1), 0.5 * t2)
            c_mat = _bc(core["c"], b)
            m_blocks = _bc(core["m_blocks"], b)
            tr_pi = t1 - np.einsum("buv,bjvu->bj", c_mat, m_blocks)
            out["t_rscr"] = _quad_stat(0.5 * (quads - tr_pi),
                                       _bc(core["info_restricted"], b))
        return out

    def information(self, psi, restricted: bool) -> np.ndarray:
        core = self.core(np.atleast_2d(psi), with_info=True)
        if restricted and self.p > 0:
            return core["info_restricted"]
        return 0.5 * core["t2"]


# ---------------------------------------------------------------------------
# Batched constrained maximization
# ---------------------------------------------------------------------------


def clip_psd_2x2_vech(vech: np.ndarray) -> np.ndarray:
    """Project half-vectorized symmetric 2x2 batches onto the PSD cone."""
    a, b, c = vech[:, 0], vech[:, 1], vech[:, 2]
    half_tr = 0.5 * (a + c)
    radius = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = half_tr + radius
    lam2 = half_tr - radius
    out = np.array(vech, dtype=float)
    neg2 = lam2 < 0
    if np.any(neg2):
        # eigenvector for lam1: (b, lam1 - a) unless b == 0
        bb = b[neg2]
        l1 = np.maximum(lam1[neg2], 0.0)
        v1 = np.stack([bb, l1 - a[neg2] + 1e-300 * (bb == 0)], axis=1)
        degenerate = np.abs(bb) < 1e-300
        v1[degenerate] = np.where(
            (a[neg2][degenerate] >= c[neg2][degenerate])[:, None],
            np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
        out[neg2, 0] = l1 * v1[:, 0] ** 2
        out[neg2, 1] = l1 * v1[:, 0] * v1[:, 1]
        out[neg2, 2] = l1 * v1[:, 1] ** 2
    return out


def batched_projected_ascent(value_and_grad, x0: np.ndarray, project,
                             tol: float = 1e-8, max_iter: int = 500,
                             value_fn=None, direction_fn=None):
    """Vectorized projected ascent with Armijo backtracking.

    value_and_grad(x, idx) maps a (k, r) parameter batch belonging to
    replication rows ``idx`` to ((k,), (k, r)); project maps batches onto the
    feasible set.  Replications converge independently (projected-gradient
    criterion); stalled rows are frozen.
    Returns (x, f, converged, pg_norm, iterations).

    When ``value_fn(x, idx)`` is given, Armijo candidates are screened with
    values only and one value_and_grad call per iteration recovers gradients
    for the accepted rows; rejected candidates never pay for a gradient.

    ``direction_fn(x, idx, g)`` turns gradients into ascent directions
    (Fisher scoring when the information matrix is available); the natural
    unit step is then tried first.  Without it, Barzilai-Borwein steps along
    the raw gradient are used.  Plain gradient steps crawl near the positive
    semidefinite cone boundary, where the likelihood surface is extremely
    anisotropic; preconditioning is what keeps boundary-correlation fits
    from hitting the iteration cap.
    """
    x = project(np.array(x0, dtype=float))
    nall = np.arange(x.shape[0])
    f, g = value_and_grad(x, nall)
    nrep = x.shape[0]
    step = (np.ones(nrep) if direction_fn is not None
            else 1.0 / np.maximum(1.0, np.linalg.norm(g, axis=1)))
    last_alpha = step.copy()
    done = np.zeros(nrep, dtype=bool)
    stagnant = np.zeros(nrep, dtype=int)
    prev_x = prev_g = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        pg = project(x + g) - x
        pg_norm = np.linalg.norm(pg, axis=1)
        done |= pg_norm <= tol * np.maximum(1.0, np.abs(f))
        active = ~done
        if not active.any():
            break
        if direction_fn is not None:
            d = g.copy()
            act = np.where(active)[0]
            d[act] = direction_fn(x[act], act, g[act])
            step = np.minimum(1.0, 64.0 * last_alpha)
        else:
            d = g
            if prev_x is not None:
                s = x - prev_x
                dg = prev_g - g
                denom = np.einsum("bj,bj->b", s, dg)
                bb = np.where(denom > 1e-300,
                              np.einsum("bj,bj->b", s, s)
                              / np.maximum(denom, 1e-300),
                              last_alpha)
                # Cap growth relative to the last accepted step so a bad
                # curvature estimate cannot restart a long backtracking
                # search.
                step = np.clip(bb, 1e-14, 64.0 * last_alpha)
        alpha = step.copy()
        accepted = ~active
        new_x, new_f, new_g = x.copy(), f.copy(), g.copy()
        for _ in range(40):
            todo = np.where(active & ~accepted)[0]
            if todo.size == 0:
                break
            cand = project(x[todo] + alpha[todo, None] * d[todo])
            try:
                if value_fn is not None:
                    cf = value_fn(cand, todo)
                    cg = None
                else:
                    cf, cg = value_and_grad(cand, todo)
            except (ValueError, np.linalg.LinAlgError):
                alpha[todo] *= 0.5
                continue
            gain = np.einsum("bj,bj->b", g[todo], cand - x[todo])
            ok = np.isfinite(cf) & (cf >= f[todo] + 1e-4 * gain)
            hit = todo[ok]
            accepted[hit] = True
            new_x[hit], new_f[hit] = cand[ok], cf[ok]
            if cg is not None:
                new_g[hit] = cg[ok]
            alpha[todo[~ok]] *= 0.5
        if value_fn is not None:
            moved_now = np.where(active & accepted)[0]
            if moved_now.size:
                gf, gg = value_and_grad(new_x[moved_now], moved_now)
                new_f[moved_now], new_g[moved_now] = gf, gg
        stalled = active & ~accepted
        done |= stalled  # no ascent step representable: treat as converged
        prev_x, prev_g = x.copy(), g.copy()
        moved = active & accepted
        last_alpha[moved] = np.maximum(alpha[moved], 1e-14)
        # Rows inching along a curved constraint boundary make negligible
        # objective progress long after the maximum is located; freeze them.
        gain_f = new_f[moved] - f[moved]
        tiny = gain_f <= 1e-11 * np.maximum(1.0, np.abs(new_f[moved]))
        stagnant[moved] = np.where(tiny, stagnant[moved] + 1, 0)
        done[moved] |= stagnant[moved] >= 10
        x[moved], f[moved], g[moved] = new_x[moved], new_f[moved], new_g[moved]
    pg = project(x + g) - x
    pg_norm = np.linalg.norm(pg, axis=1)
    converged = (pg_norm <= tol * np.maximum(1.0, np.abs(f))) | done
    return x, f, converged, pg_norm, iterations
