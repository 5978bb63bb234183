from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chi2

from gvcjobs.diagnostics import MAX_KP_ENDOG, diagnostics_report, hansen_j, kp_rk_lm
from gvcjobs.estimator import DesignMatrices, EstimationError, estimate_gmm_two_step
from gvcjobs.numerics import chi2_sf
from gvcjobs.synthgen import simple_iv_design


def design(y, endog, excluded, exog):
    X = np.column_stack([endog, exog])
    Z = np.column_stack([excluded, exog])
    ke, le = np.atleast_2d(endog.T).shape[0], np.atleast_2d(excluded.T).shape[0]
    return DesignMatrices(y, X, Z, tuple(f"x{i}" for i in range(X.shape[1])),
                          tuple(f"z{i}" for i in range(Z.shape[1])), ke, le, np.arange(len(y)))


def two_endog_design(n=3000, seed=0, weak=0.15, n_instruments=4, hetero=False):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, n_instruments))
    w = rng.standard_normal(n)
    Pi = np.zeros((n_instruments, 2))
    Pi[:, 0] = 0.5
    Pi[0, 1] = weak
    v = rng.standard_normal((n, 2))
    x = z @ Pi + v + 0.3 * w[:, None]
    e = 0.4 * v[:, 0] + rng.standard_normal(n)
    if hetero:
        e *= np.sqrt(0.5 + z[:, 1] ** 2)
    y = x @ [1.0, -1.0] + w + e
    return design(y, x, z, np.column_stack([w, np.ones(n)]))


def partial_out(W, M):
    return M - W @ np.linalg.lstsq(W, M, rcond=None)[0]


def anderson_lm(d):
    """n times the smallest squared canonical correlation of the partialled blocks."""
    Xt = partial_out(d.exog, d.endog)
    Zt = partial_out(d.exog, d.excluded)
    Qx = np.linalg.qr(Xt)[0]
    Qz = np.linalg.qr(Zt)[0]
    rho = np.linalg.svd(Qx.T @ Qz, compute_uv=False)
    return d.n * rho.min() ** 2


def test_exactly_identified_hansen_na():
    d = simple_iv_design(200, 0.5, n_instruments=1, seed=1)
    j = hansen_j(d, estimate_gmm_two_step(d).beta)
    assert j.stat == 0.0 and j.dof == 0 and j.pvalue is None and not j.applicable


def test_hansen_order_condition():
    d = simple_iv_design(100, 0.5, n_instruments=1, seed=1)
    bad = DesignMatrices(d.y, d.X, d.Z[:, 1:], d.x_labels, d.z_labels[1:], 1, 0, d.rows)
    with pytest.raises(EstimationError, match="order condition"):
        hansen_j(bad, np.zeros(3))


def test_hansen_matches_direct_formula():
    d = simple_iv_design(500, 0.4, n_instruments=3, seed=2, heteroskedastic=True)
    beta = estimate_gmm_two_step(d).beta
    e = d.y - d.X @ beta
    gbar = d.Z.T @ e / d.n
    S = (d.Z * e[:, None] ** 2).T @ d.Z / d.n
    direct = d.n * gbar @ np.linalg.solve(S, gbar)
    j = hansen_j(d, beta)
    assert j.stat == pytest.approx(direct, rel=1e-9)
    assert j.dof == 2


@pytest.mark.parametrize("maker", [
    lambda: simple_iv_design(500, 0.4, n_instruments=3, seed=3, heteroskedastic=True),
    lambda: two_endog_design(seed=3),
])
def test_pvalues_are_chi2_sf(maker):
    d = maker()
    rep = diagnostics_report(d, estimate_gmm_two_step(d).beta)
    assert rep.hansen_j_pvalue == chi2_sf(rep.hansen_j_stat, rep.hansen_j_dof)
    assert rep.kp_lm_pvalue == chi2_sf(rep.kp_lm_stat, rep.kp_lm_dof)
    assert rep.hansen_j_pvalue == pytest.approx(chi2.sf(rep.hansen_j_stat, rep.hansen_j_dof), rel=1e-6, abs=1e-12)
    assert rep.kp_lm_pvalue == pytest.approx(chi2.sf(rep.kp_lm_stat, rep.kp_lm_dof), rel=1e-6, abs=1e-12)
    assert rep.hansen_j_stat >= 0 and rep.kp_lm_stat >= 0


def test_hansen_invariant_to_orthogonal_control():
    d = simple_iv_design(400, 0.4, n_instruments=3, seed=4, heteroskedastic=True)
    # A control orthogonal to every column, to the outcome and to the robust
    # moment contributions z * e^2 of both GMM steps.
    rng = np.random.default_rng(0)
    fit = estimate_gmm_two_step(d)
    e1 = d.y - d.X @ fit.first_step
    e2 = fit.resid
    basis = np.column_stack([d.X, d.Z, d.y, d.Z * (e1**2)[:, None], d.Z * (e2**2)[:, None]])
    c = rng.standard_normal(d.n)
    c -= basis @ np.linalg.lstsq(basis, c, rcond=None)[0]
    X = np.column_stack([d.X, c])
    Z = np.column_stack([d.Z, c])
    e = DesignMatrices(d.y, X, Z, d.x_labels + ("c",), d.z_labels + ("c",), 1, 3, d.rows)
    ja = hansen_j(d, estimate_gmm_two_step(d).beta).stat
    jb = hansen_j(e, estimate_gmm_two_step(e).beta).stat
    assert abs(ja - jb) < 1e-6


def test_kp_dof_increases_by_one_per_instrument():
    dofs = [kp_rk_lm(simple_iv_design(300, 0.4, n_instruments=m, seed=5)).dof for m in (1, 2, 3, 4)]
    assert dofs == [1, 2, 3, 4]
    d = two_endog_design(n=500, n_instruments=5)
    sub = [design(d.y, d.endog, d.excluded[:, :m], d.exog) for m in (2, 3, 4, 5)]
    assert [kp_rk_lm(s).dof for s in sub] == [1, 2, 3, 4]


def test_kp_single_endogenous_homoskedastic_close_to_n_r2():
    for seed in range(5):
        d = simple_iv_design(20000, 0.03, n_instruments=3, seed=seed)
        xt = partial_out(d.exog, d.endog[:, 0])
        zt = partial_out(d.exog, d.excluded)
        fitted = zt @ np.linalg.lstsq(zt, xt, rcond=None)[0]
        r2 = fitted @ fitted / (xt @ xt)
        stat = kp_rk_lm(d, "HC0").stat
        assert stat == pytest.approx(d.n * r2, rel=0.10)


def test_kp_multi_endogenous_close_to_anderson_under_homoskedasticity():
    for seed in range(3):
        d = two_endog_design(n=5000, seed=seed, weak=0.12)
        ref = anderson_lm(d)
        assert 20 < ref < 200
        assert kp_rk_lm(d, "HC0").stat == pytest.approx(ref, rel=0.10)


def test_kp_multi_endogenous_scaling_invariance():
    d = two_endog_design(n=1500, seed=4, hetero=True)
    Z = d.Z.copy()
    Z[:, 0] *= 250.0
    Z[:, 2] *= -0.003
    e = DesignMatrices(d.y, d.X, Z, d.x_labels, d.z_labels, 2, 4, d.rows)
    assert kp_rk_lm(e).stat == pytest.approx(kp_rk_lm(d).stat, rel=1e-8)


def test_kp_detects_rank_deficiency():
    # Second endogenous regressor unrelated to the instruments: the matrix of
    # reduced-form coefficients has rank one.
    d = two_endog_design(n=3000, seed=6, weak=0.0)
    strong = two_endog_design(n=3000, seed=6, weak=0.3)
    assert kp_rk_lm(strong).pvalue < 1e-6
    assert kp_rk_lm(d).pvalue > 1e-4


def test_kp_errors():
    d = simple_iv_design(100, 0.5, n_instruments=1, seed=1)
    none = DesignMatrices(d.y, d.X[:, 1:], d.Z[:, 1:], d.x_labels[1:], d.z_labels[1:], 0, 0, d.rows)
    with pytest.raises(EstimationError, match="endogenous"):
        kp_rk_lm(none)
    two = two_endog_design(n=200, n_instruments=1)
    with pytest.raises(EstimationError, match="under-identified"):
        kp_rk_lm(two)
    rng = np.random.default_rng(0)
    n, k = 200, MAX_KP_ENDOG + 1
    big = design(rng.standard_normal(n), rng.standard_normal((n, k)), rng.standard_normal((n, k + 1)), np.ones((n, 1)))
    with pytest.raises(EstimationError, match="at most"):
        kp_rk_lm(big)


def test_strong_single_instrument_small_pvalue():
    d = simple_iv_design(2000, 10 / np.sqrt(2000), n_instruments=1, seed=9, heteroskedastic=True)
    assert kp_rk_lm(d).pvalue < 0.001
