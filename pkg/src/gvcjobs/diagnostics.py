"""Hansen J overidentification and Kleibergen-Paap rk LM underidentification tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numerics
from .estimator import DesignMatrices, EstimationError, _col_scaled, _moment_cov

MAX_KP_ENDOG = 3


@dataclass(frozen=True)
class Statistic:
    stat: float
    dof: int
    pvalue: float | None

    @property
    def applicable(self) -> bool:
        return self.pvalue is not None


@dataclass(frozen=True)
class DiagnosticsReport:
    kp_lm_stat: float
    kp_lm_dof: int
    kp_lm_pvalue: float
    hansen_j_stat: float
    hansen_j_dof: int
    hansen_j_pvalue: float | None


def hansen_j(d: DesignMatrices, beta, chol_S=None) -> Statistic:
    """``J = n gbar' W gbar`` with ``W`` built from the residuals of ``beta``.

    Under exact identification the statistic is 0 and the p-value is None
    (reported as NA).
    """
    dof = d.L - d.k
    if dof < 0:
        raise EstimationError("diagnostics", f"order condition violated: L={d.L} < k={d.k}")
    if dof == 0:
        return Statistic(0.0, 0, None)
    Zs = _col_scaled(d.Z)
    e = d.y - d.X @ np.asarray(beta)
    g = Zs.T @ e
    if chol_S is None:
        chol_S = numerics.cholesky_pd(_moment_cov(Zs, e, "HC0", d.k))
    w = scipy.linalg.solve_triangular(chol_S, g, lower=True)
    stat = float(w @ w)
    return Statistic(stat, dof, numerics.chi2_sf(stat, dof))


def _residualize(W, M):
    if W.shape[1] == 0:
        return M
    coef, _ = numerics.solve_least_squares(W, M)
    return M - W @ coef


def _sym_power(A, power):
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    if np.any(vals <= 0):
        raise EstimationError("diagnostics", "singular moment matrix in rank test")
    return (vecs * vals**power) @ vecs.T


def kp_rk_lm(d: DesignMatrices, covariance: str = "HC1") -> Statistic:
    """Robust LM test that the reduced-form matrix has rank ``k_e - 1``.

    Exogenous columns are partialled out of the endogenous block and the
    excluded instruments. The reduced-form coefficients ``Pi`` are normalised
    as ``Theta = (Z'Z)^{1/2} Pi (X'X)^{-1/2}``; the statistic is the robustly
    weighted quadratic form in the component of ``Theta`` along its smallest
    singular direction, with the covariance of ``vec(Pi)`` computed from
    residuals under the rank-deficient null. With one endogenous regressor it
    is the robust score test that all first-stage coefficients are zero.
    """
    ke, le = d.n_endog, d.n_excluded
    if ke == 0:
        raise EstimationError("diagnostics", "rank test needs an endogenous regressor")
    if le < ke:
        raise EstimationError("diagnostics", f"under-identified: {le} excluded instruments for {ke} endogenous")
    if ke > MAX_KP_ENDOG:
        raise EstimationError("diagnostics", f"rank test supports at most {MAX_KP_ENDOG} endogenous regressors")
    n = d.n
    W = d.exog
    both = _residualize(W, np.hstack([d.endog, _col_scaled(d.excluded)]))
    Xt, Zt = both[:, :ke], both[:, ke:]
    Qzz = Zt.T @ Zt
    Pi, _ = numerics.solve_least_squares(Zt, Xt)
    Pi = Pi.reshape(le, ke)
    dof = le - ke + 1

    if ke == 1:
        v0 = Xt[:, 0]
        S = _moment_cov(Zt, v0, covariance, d.L)
        g = Zt.T @ v0
        L = numerics.cholesky_pd(S)
        w = scipy.linalg.solve_triangular(L, g, lower=True)
        stat = float(w @ w)
        return Statistic(stat, dof, numerics.chi2_sf(stat, dof))

    F = _sym_power(Qzz / n, 0.5)
    Finv = _sym_power(Qzz / n, -0.5)
    G = _sym_power(Xt.T @ Xt / n, -0.5)
    Ginv = _sym_power(Xt.T @ Xt / n, 0.5)
    Theta = F @ Pi @ G
    U, s, Vt = numerics.svd_jacobi(Theta)
    q = ke - 1
    A_perp = np.hstack([U[:, q:], _complement(U)])
    B_perp = Vt.T[:, q:]

    Theta0 = (U[:, :q] * s[:q]) @ Vt[:q]
    Pi0 = Finv @ Theta0 @ Ginv
    V0 = Xt - Zt @ Pi0
    H = (V0[:, :, None] * Zt[:, None, :]).reshape(n, ke * le)
    meat = H.T @ H
    if covariance == "HC1":
        meat *= n / (n - d.L)
    Qinv = numerics.invert_pd(Qzz)
    cov_pi = np.kron(np.eye(ke), Qinv) @ meat @ np.kron(np.eye(ke), Qinv)
    T = np.kron(B_perp.T, A_perp.T) @ np.kron(G, F)
    lam = T @ Pi.reshape(-1, order="F")
    omega = T @ cov_pi @ T.T
    L = numerics.cholesky_pd(0.5 * (omega + omega.T))
    w = scipy.linalg.solve_triangular(L, lam, lower=True)
    stat = float(w @ w)
    return Statistic(stat, dof, numerics.chi2_sf(stat, dof))


def _complement(U):
    """Orthonormal basis of the orthogonal complement of U's column space."""
    m, r = U.shape
    if r >= m:
        return np.zeros((m, 0))
    Q, _, _ = scipy.linalg.qr(np.eye(m) - U @ U.T, pivoting=True)
    return Q[:, : m - r]


def diagnostics_report(d: DesignMatrices, beta, covariance: str = "HC1") -> DiagnosticsReport:
    kp = kp_rk_lm(d, covariance)
    hj = hansen_j(d, beta)
    return DiagnosticsReport(kp.stat, kp.dof, kp.pvalue, hj.stat, hj.dof, hj.pvalue)
