from __future__ import annotations

import numpy as np
import pytest

from gvcjobs.diagnostics import hansen_j, kp_rk_lm
from gvcjobs.estimator import (
    CRITICAL_T,
    INTERCEPT,
    CorrelatedControlsWarning,
    DesignMatrices,
    EstimationError,
    build_design,
    estimate_2sls,
    estimate_gmm_two_step,
    estimate_ols,
    r_squared,
    run_specification,
    significance_stars,
)
from gvcjobs.model import BACKWARD, FORWARD, SECT_PROD, SECT_WAGE, ModelSpec
from gvcjobs.panel import PanelDataset
from gvcjobs.synthgen import SyntheticConfig, generate_calibrated, simple_iv_design


@pytest.fixture(scope="module")
def synth():
    config = SyntheticConfig(n_countries=20, n_sectors=20, year_range=(2010, 2016), n_regions=3)
    return generate_calibrated(config, seed=1)


def small_panel(seed=0, n_countries=4, years=range(2010, 2016), extra=None):
    rng = np.random.default_rng(seed)
    keys = {"country": [], "sector": [], "year": []}
    for c in range(n_countries):
        for s in (10, 11, 12):
            for y in years:
                keys["country"].append(f"C{c}")
                keys["sector"].append(s)
                keys["year"].append(y)
    n = len(keys["year"])
    cols = {"log_jobs": (rng.standard_normal(n), None), "x1": (rng.standard_normal(n), None),
            "x2": (rng.standard_normal(n), None)}
    cols.update(extra or {})
    return PanelDataset(keys, cols)


def manual_design(y, X, Z, n_endog, n_excluded):
    X = np.asarray(X, float)
    Z = np.asarray(Z, float)
    return DesignMatrices(np.asarray(y, float), X, Z,
                          tuple(f"x{i}" for i in range(X.shape[1])),
                          tuple(f"z{i}" for i in range(Z.shape[1])),
                          n_endog, n_excluded, np.arange(len(y)))


def brute_force_gmm(d, hc="HC1"):
    """Closed-form two-step GMM written with plain inverses."""
    X, Z, y = d.X, d.Z, d.y
    n, k = X.shape
    Xhat = Z @ np.linalg.inv(Z.T @ Z) @ Z.T @ X
    b1 = np.linalg.inv(Xhat.T @ X) @ Xhat.T @ y
    scale = n / (n - k) if hc == "HC1" else 1.0
    e1 = y - X @ b1
    S1 = scale * (Z * e1[:, None] ** 2).T @ Z
    W = np.linalg.inv(S1)
    b2 = np.linalg.inv(X.T @ Z @ W @ Z.T @ X) @ X.T @ Z @ W @ Z.T @ y
    e2 = y - X @ b2
    S2 = scale * (Z * e2[:, None] ** 2).T @ Z
    V = np.linalg.inv(X.T @ Z @ np.linalg.inv(S2) @ Z.T @ X)
    return b1, b2, V


# --- design ----------------------------------------------------------------------


def test_year_fixed_effects_add_reference_dropped_dummies():
    panel = small_panel(years=range(2010, 2013))
    d = build_design(panel, ModelSpec(controls=("x1",), lags=(), fixed_effects=("year",)))
    assert d.x_labels == ("x1", "year=2011", "year=2012", INTERCEPT)
    assert d.z_labels == d.x_labels
    assert d.n == panel.n


def test_forward_only_baseline_design(synth):
    d = build_design(synth.panel, ModelSpec(endogenous=(FORWARD,)))
    assert d.x_labels[0] == FORWARD and d.x_labels[-1] == INTERCEPT
    assert all("=" in label for label in d.x_labels[1:-1])
    assert d.z_labels[:2] == (f"{FORWARD}_lag1", f"{FORWARD}_lag2")
    assert d.L == d.k + 1


def test_region_fixed_effects_add_regions_minus_one():
    rng = np.random.default_rng(3)
    regions = ["r1", "r2", "r3", "r4"]
    keys = {"country": [], "region": [], "sector": [], "year": []}
    for r in regions:
        for y in range(2010, 2016):
            keys["country"].append("A")
            keys["region"].append(r)
            keys["sector"].append(10)
            keys["year"].append(y)
    n = len(keys["year"])
    panel = PanelDataset(keys, {"log_jobs": (rng.standard_normal(n), None), "x1": (rng.standard_normal(n), None)})
    base = build_design(panel, ModelSpec(controls=("x1",), lags=(), fixed_effects=("year",)))
    more = build_design(panel, ModelSpec(controls=("x1",), lags=(), fixed_effects=("year", "region")))
    assert more.k - base.k == len(regions) - 1


def test_nested_region_dummies_pruned_against_country(synth):
    reg = synth.regional
    spec = ModelSpec(endogenous=(FORWARD,))
    base = build_design(reg, spec)
    more = build_design(reg, ModelSpec(endogenous=(FORWARD,), fixed_effects=("sector", "country", "year", "region")))
    present_regions = len(set(reg.keys["region"][more.rows].tolist()))
    present_countries = len(set(reg.keys["country"][more.rows].tolist()))
    assert more.k - base.k == present_regions - present_countries
    assert all(name.startswith("region=") for name in more.dropped)


def test_listwise_deletion():
    miss = np.zeros(72, bool)
    miss[[0, 5, 9]] = True
    panel = small_panel()
    panel = panel.with_column("x2", panel.values("x2"), miss)
    d = build_design(panel, ModelSpec(controls=("x1", "x2"), lags=(), fixed_effects=()))
    assert d.n == panel.n - 3
    assert not np.isin(d.rows, [0, 5, 9]).any()


def test_collinear_control_dropped_and_reported():
    panel = small_panel()
    panel = panel.with_column("x3", 2.0 * panel.values("x1") - 1.0)
    d = build_design(panel, ModelSpec(controls=("x1", "x3"), lags=(), fixed_effects=("year",)))
    assert "x3" in d.dropped and "x3" not in d.x_labels


def test_design_errors():
    panel = small_panel(years=range(2010, 2012))
    with pytest.raises(EstimationError, match="sample too small"):
        build_design(panel.take(np.arange(3)), ModelSpec(controls=("x1", "x2"), lags=(), fixed_effects=("year",)))
    with pytest.raises(EstimationError, match="under-identified"):
        build_design(small_panel(extra={"z": (np.arange(72.0), None)}),
                     ModelSpec(endogenous=("x1", "x2"), lags=(), instruments=("z",), fixed_effects=()))


# --- estimators -----------------------------------------------------------------


def test_four_observation_example():
    y = [1.0, 2.0, 3.0, 5.0]
    x = np.array([1.0, 2.0, 3.0, 4.0])
    z = 2.0 * x
    one = np.ones(4)
    d = manual_design(y, np.column_stack([x, one]), np.column_stack([z, one]), 1, 1)
    # Hand normal equations: slope = S_zy / S_zx = 13 / 10.
    zc, yc, xc = z - z.mean(), np.asarray(y) - np.mean(y), x - x.mean()
    slope = float(zc @ yc) / float(zc @ xc)
    assert slope == pytest.approx(1.3, abs=1e-15)
    fit = estimate_2sls(d)
    assert fit.beta[0] == pytest.approx(1.3, abs=1e-12)
    assert fit.beta[0] == pytest.approx(estimate_ols(d).beta[0], abs=1e-12)
    np.testing.assert_allclose(fit.resid, np.asarray(y) - d.X @ fit.beta, atol=1e-14)


def test_z_equal_x_gives_ols():
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.standard_normal((50, 3)), np.ones(50)])
    y = X @ [1.0, -2.0, 0.5, 3.0] + rng.standard_normal(50)
    d = manual_design(y, X, X, 0, 0)
    np.testing.assert_allclose(estimate_2sls(d).beta, estimate_ols(d).beta, rtol=1e-12, atol=1e-12)


def test_exact_identification_three_paths_agree():
    d = simple_iv_design(400, 0.5, n_instruments=1, seed=11, heteroskedastic=True)
    assert d.L == d.k
    direct = np.linalg.solve(d.Z.T @ d.X, d.Z.T @ d.y)
    Xhat = d.Z @ np.linalg.lstsq(d.Z, d.X, rcond=None)[0]
    on_fitted = np.linalg.lstsq(Xhat, d.y, rcond=None)[0]
    two = estimate_2sls(d).beta
    gmm = estimate_gmm_two_step(d).beta
    for a, b in [(two, direct), (gmm, direct), (gmm, two), (on_fitted, direct)]:
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_gmm_matches_brute_force_closed_form():
    d = simple_iv_design(800, 0.4, n_instruments=4, seed=7, heteroskedastic=True)
    b1, b2, V = brute_force_gmm(d)
    fit = estimate_gmm_two_step(d)
    np.testing.assert_allclose(fit.first_step, b1, rtol=1e-9)
    np.testing.assert_allclose(fit.beta, b2, rtol=1e-9)
    np.testing.assert_allclose(fit.vcov, V, rtol=1e-8)
    np.testing.assert_allclose(fit.resid, d.y - d.X @ fit.beta, atol=1e-12)


def test_hc0_and_hc1_differ_only_by_scale():
    d = simple_iv_design(300, 0.6, n_instruments=3, seed=5, heteroskedastic=True)
    f0 = estimate_gmm_two_step(d, "HC0")
    f1 = estimate_gmm_two_step(d, "HC1")
    np.testing.assert_allclose(f0.beta, f1.beta, rtol=1e-12)
    np.testing.assert_allclose(f1.vcov, f0.vcov * d.n / (d.n - d.k), rtol=1e-10)


def test_homoskedastic_gmm_close_to_2sls():
    close = 0
    for seed in range(500):
        d = simple_iv_design(300, 0.3, n_instruments=3, seed=seed)
        gmm = estimate_gmm_two_step(d)
        two = estimate_2sls(d)
        close += abs(gmm.beta[0] - two.beta[0]) < 2 * gmm.se[0]
    assert close / 500 >= 0.95


def test_instrument_scaling_invariance():
    d = simple_iv_design(600, 0.3, n_instruments=3, seed=8, heteroskedastic=True)
    for c in (1e3, -0.01, 7.0):
        Z = d.Z.copy()
        Z[:, 1] *= c
        e = DesignMatrices(d.y, d.X, Z, d.x_labels, d.z_labels, d.n_endog, d.n_excluded, d.rows)
        a, b = estimate_gmm_two_step(d), estimate_gmm_two_step(e)
        np.testing.assert_allclose(b.beta, a.beta, rtol=1e-8)
        np.testing.assert_allclose(b.se, a.se, rtol=1e-8)
        assert hansen_j(e, b.beta).stat == pytest.approx(hansen_j(d, a.beta).stat, rel=1e-8)
        assert kp_rk_lm(e).stat == pytest.approx(kp_rk_lm(d).stat, rel=1e-8)


def test_first_stage_rank_deficiency_names_columns():
    rng = np.random.default_rng(0)
    n = 40
    w = rng.standard_normal(n)
    x = rng.standard_normal(n)
    one = np.ones(n)
    d = manual_design(rng.standard_normal(n), np.column_stack([x, w, one]),
                      np.column_stack([3.0 * w, w, one]), 1, 1)
    with pytest.raises(EstimationError, match="2sls") as info:
        estimate_2sls(d)
    assert info.value.stage == "2sls"
    assert "z0" in str(info.value) or "z1" in str(info.value)


# --- FE equivalence --------------------------------------------------------------


def test_dummy_expansion_equals_within_demeaning():
    rng = np.random.default_rng(9)
    countries = np.repeat([f"C{i}" for i in range(10)], 50)
    years = np.tile(np.arange(1950, 2000), 10)
    fe = np.repeat(rng.standard_normal(10) * 3, 50)
    x1 = rng.standard_normal(500) + fe
    x2 = rng.standard_normal(500)
    y = 0.7 * x1 - 1.2 * x2 + fe + rng.standard_normal(500)
    panel = PanelDataset({"country": countries, "year": years},
                         {"log_jobs": (y, None), "x1": (x1, None), "x2": (x2, None)})
    d = build_design(panel, ModelSpec(controls=("x1", "x2"), lags=(), fixed_effects=("country",)))
    beta = estimate_ols(d).beta[:2]
    codes = np.unique(countries, return_inverse=True)[1]

    def demean(v):
        means = np.bincount(codes, v) / np.bincount(codes)
        return v - means[codes]

    W = np.column_stack([demean(x1), demean(x2)])
    within = np.linalg.lstsq(W, demean(y), rcond=None)[0]
    np.testing.assert_allclose(beta, within, rtol=1e-8, atol=1e-8)


# --- r squared and stars -----------------------------------------------------------


def test_r_squared_examples():
    y = np.array([1.0, 3.0, 2.0, 7.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(4, y.mean())) == pytest.approx(0.0, abs=1e-15)
    fitted = np.array([1.5, 2.0, 2.5, 6.0])
    assert r_squared(y, fitted) == pytest.approx(1 - np.sum((y - fitted) ** 2) / np.sum((y - y.mean()) ** 2))
    assert r_squared(y, -y) < 0
    with pytest.raises(ValueError, match="zero variance"):
        r_squared(np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])


def test_star_thresholds():
    assert CRITICAL_T[0.10] == pytest.approx(1.645, abs=5e-4)
    assert CRITICAL_T[0.05] == pytest.approx(1.960, abs=5e-4)
    assert CRITICAL_T[0.01] == pytest.approx(2.576, abs=5e-4)
    assert significance_stars(0.0001) == "***"
    assert significance_stars(0.03) == "**"
    assert significance_stars(0.07) == "*"
    assert significance_stars(0.5) == ""


def _stars_from_t(t):
    t = abs(t)
    return "***" if t > CRITICAL_T[0.01] else "**" if t > CRITICAL_T[0.05] else "*" if t > CRITICAL_T[0.10] else ""


# --- run_specification --------------------------------------------------------------


def test_planted_forward_recovered(synth):
    res = run_specification(synth.panel, ModelSpec(endogenous=(FORWARD,)))
    c = res[FORWARD]
    assert c.estimate > 0 and c.pvalue < 0.01 and c.stars == "***"
    assert abs(c.estimate - 0.9) < 3 * c.se


def test_planted_backward_recovered(synth):
    res = run_specification(synth.panel, ModelSpec(endogenous=(BACKWARD,)))
    c = res[BACKWARD]
    assert c.estimate < 0 and c.pvalue < 0.05


def test_result_invariants(synth):
    res = run_specification(synth.panel, ModelSpec(endogenous=(FORWARD, BACKWARD), controls=("gdp_growth", "trade")))
    for name, c in res.coefficients.items():
        assert c.se > 0, name
        assert 0.0 <= c.pvalue <= 1.0
        assert c.stars == _stars_from_t(c.t)
    assert 0.0 <= res.hansen_j_pvalue <= 1.0 and 0.0 <= res.kp_lm_pvalue <= 1.0
    assert res.hansen_j_dof == 2 and res.kp_lm_dof == 3
    assert res.n == len(res.rows)


def test_exactly_identified_hansen_na(synth):
    res = run_specification(synth.panel, ModelSpec(endogenous=(FORWARD,), lags=(1,)))
    assert res.hansen_j_stat == 0.0 and res.hansen_j_pvalue is None and res.hansen_j_dof == 0


def test_correlated_controls_warn_but_run(synth):
    spec = ModelSpec(endogenous=(FORWARD,), controls=(SECT_PROD, SECT_WAGE))
    with pytest.warns(CorrelatedControlsWarning, match="highly correlated"):
        res = run_specification(synth.panel, spec)
    assert SECT_PROD in res.coefficients and any("correlated" in w for w in res.warnings)


def test_no_endogenous_lags_ignored(synth):
    res = run_specification(synth.panel, ModelSpec(controls=("gdp_growth",)))
    assert any("lags ignored" in w for w in res.warnings)
    assert res.kp_lm_pvalue is None and res.hansen_j_pvalue is None


def test_row_permutation_invariance(synth):
    spec = ModelSpec(endogenous=(FORWARD,), controls=("gdp_growth", SECT_PROD))
    a = run_specification(synth.panel, spec)
    perm = np.random.default_rng(0).permutation(synth.panel.n)
    b = run_specification(synth.panel.take(perm), spec)
    assert a.n == b.n and a.rows == b.rows
    for name in a.coefficients:
        assert b[name].estimate == pytest.approx(a[name].estimate, rel=1e-10, abs=1e-10)
        assert b[name].se == pytest.approx(a[name].se, rel=1e-10)
    for attr in ("r_squared", "hansen_j_stat", "kp_lm_stat"):
        assert getattr(b, attr) == pytest.approx(getattr(a, attr), rel=1e-10)


def test_stage_labels(synth):
    with pytest.raises(EstimationError) as info:
        run_specification(synth.panel, ModelSpec(endogenous=(FORWARD,), sample="eu_membership:old"))
    assert info.value.stage == "sample"
    with pytest.raises(EstimationError) as info:
        run_specification(synth.panel, ModelSpec(endogenous=("not_there",)))
    assert info.value.stage in ("lags", "design")
    with pytest.raises(EstimationError) as info:
        run_specification(synth.panel, ModelSpec(endogenous=(FORWARD,), sample="nope:x"))
    assert info.value.stage == "sample"
