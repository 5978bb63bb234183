from __future__ import annotations

import math

import numpy as np
import pytest

from gvcjobs.config import ConfigError
from gvcjobs.estimator import build_design, estimate_2sls, estimate_ols
from gvcjobs.model import BACKWARD, FORWARD, LOG_JOBS, POSITION, SECT_PROD, SECT_WAGE, ModelSpec
from gvcjobs.panel import PanelDataset, correlate, describe, lag
from gvcjobs.synthgen import (
    DEFAULT_CORRELATION,
    VARIABLES,
    CorrelationRepairError,
    SyntheticConfig,
    config_from_text,
    generate_calibrated,
    latent_correlation,
    monte_carlo,
    read_config,
    repair_correlation,
)

SMALL = dict(n_countries=8, n_sectors=6, year_range=(2010, 2016), n_regions=3)


@pytest.fixture(scope="module")
def default_panel():
    return generate_calibrated(SyntheticConfig(), seed=0)


def test_default_size(default_panel):
    assert default_panel.panel.n == 27 * 21 * 18 >= 10000


def test_targeted_means_within_tolerance(default_panel):
    config = SyntheticConfig()
    stats = describe(default_panel.panel, VARIABLES)
    for name in VARIABLES:
        gap = abs(stats[name].mean - config.target_means[name])
        assert gap <= 0.03 * config.target_sds[name], name
    assert stats[FORWARD].mean == pytest.approx(0.67, abs=0.02)
    assert stats[BACKWARD].mean == pytest.approx(0.30, abs=0.02)
    assert stats[POSITION].mean == pytest.approx(1.00, abs=0.01)


def test_regressor_correlations_within_tolerance(default_panel):
    corr = correlate(default_panel.panel, VARIABLES)
    regressors = VARIABLES[1:]
    for i, a in enumerate(regressors):
        for b in regressors[:i]:
            target = DEFAULT_CORRELATION[VARIABLES.index(a), VARIABLES.index(b)]
            assert abs(corr(a, b) - target) <= 0.03, (a, b)
    assert corr(SECT_PROD, SECT_WAGE) == pytest.approx(0.7489, abs=0.03)


def test_lagged_innovations_uncorrelated_with_error(default_panel):
    cells = default_panel.truth.cells
    for name in (FORWARD, BACKWARD):
        lagged = lag(cells, f"innovation_{name}", 1)
        col = lagged.column(f"innovation_{name}_lag1")
        ok = ~col.missing
        r = np.corrcoef(col.values[ok], cells.values("error")[ok])[0, 1]
        assert abs(r) < 0.02
        # The contemporaneous innovation carries the planted endogeneity.
        r0 = np.corrcoef(cells.values(f"innovation_{name}"), cells.values("error"))[0, 1]
        assert abs(r0) > 0.1


def test_truth_kept_out_of_panel(default_panel):
    cols = set(default_panel.panel.columns)
    assert not cols & {"error", "log_jobs_star"}
    assert not any(c.startswith("innovation_") for c in cols)
    assert default_panel.truth.beta[FORWARD] == 0.9


def test_country_labels():
    synth = generate_calibrated(SyntheticConfig(**SMALL), seed=1)
    assert sorted(set(synth.panel.keys["country"].tolist())) == [f"C{i:02d}" for i in range(1, 9)]


def test_determinism_byte_identical(tmp_path):
    config = SyntheticConfig(**SMALL, seed=42)
    a = generate_calibrated(config)
    b = generate_calibrated(config)
    assert a.panel.equals(b.panel)
    assert a.regional.equals(b.regional)
    pa = a.write_sources(tmp_path / "a")
    pb = b.write_sources(tmp_path / "b")
    for name in pa:
        assert pa[name].read_bytes() == pb[name].read_bytes()
    c = generate_calibrated(config, seed=43)
    assert not a.panel.equals(c.panel)


def test_direct_panel_matches_source_route():
    config = SyntheticConfig(**SMALL, seed=3)
    a = generate_calibrated(config, via_sources=True).panel
    b = generate_calibrated(config, via_sources=False).panel
    assert a.n == b.n
    for name in (LOG_JOBS, "gdp_growth", SECT_PROD):
        np.testing.assert_allclose(a.values(name)[a.sort_order()], b.values(name)[b.sort_order()], rtol=1e-9)


def test_regional_jobs_conserved():
    synth = generate_calibrated(SyntheticConfig(**SMALL, seed=5))
    nat, reg = synth.panel, synth.regional
    total = {}
    for c, s, y, j in zip(reg.keys["country"], reg.keys["sector"], reg.keys["year"], reg.values("jobs")):
        total[(c, s, y)] = total.get((c, s, y), 0.0) + j
    for c, s, y, j in zip(nat.keys["country"], nat.keys["sector"], nat.keys["year"], nat.values("jobs")):
        assert total[(c, s, y)] == j
    counts = reg.values("n_regions")
    assert counts.min() >= 1 and counts.max() <= 3


def test_no_endogeneity_ols_matches_2sls():
    # Single draws differ by 2SLS sampling noise (sd about 0.04 here), so the
    # agreement is checked in expectation over seeds.
    config = SyntheticConfig(endogeneity_rho=0.0, n_regions=None, missing={})
    ols, iv = [], []
    for seed in range(20):
        panel = generate_calibrated(config, seed=seed, via_sources=False).panel
        d = build_design(panel, ModelSpec(endogenous=(FORWARD,)))
        assert d.n >= 9000
        ols.append(estimate_ols(d).beta[0])
        iv.append(estimate_2sls(d).beta[0])
    assert abs(np.mean(ols) - np.mean(iv)) < 0.03


def test_repair_correlation():
    R = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    assert np.linalg.eigvalsh(R).min() < 0
    fixed = repair_correlation(R)
    np.testing.assert_allclose(np.diag(fixed), 1.0)
    np.testing.assert_allclose(fixed, fixed.T)
    assert np.linalg.eigvalsh(fixed).min() > 0
    good = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert np.array_equal(repair_correlation(good), good)


def test_unrepairable_correlation_names_eigenvalue():
    R = np.array([[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    with pytest.raises(CorrelationRepairError, match="most negative eigenvalue -1"):
        repair_correlation(R, floor=0.0)


def test_latent_correlation_is_valid():
    R = latent_correlation(SyntheticConfig())
    np.testing.assert_allclose(np.diag(R), 1.0)
    assert np.linalg.eigvalsh(R).min() > 0


def test_config_validation():
    with pytest.raises(ValueError, match="endogeneity_rho"):
        SyntheticConfig(endogeneity_rho=0.95)
    with pytest.raises(ValueError, match="instrument_strength"):
        SyntheticConfig(instrument_strength=1.0)
    with pytest.raises(ValueError, match="finite"):
        SyntheticConfig(planted_beta={FORWARD: math.inf})
    bad = DEFAULT_CORRELATION.copy()
    bad[0, 1] = 0.5
    with pytest.raises(ValueError, match="symmetric"):
        SyntheticConfig(target_correlation=bad)
    sds = dict(SyntheticConfig().target_sds)
    sds[FORWARD] = 0.0
    with pytest.raises(ValueError, match="positive"):
        SyntheticConfig(target_sds=sds)


def test_config_text(tmp_path):
    text = ("n_countries = 5\nyear_range = 2001, 2009\nn_regions = none\n"
            "beta.gvc_forward = 1.5\ncorr.log_sect_prod.log_sect_wage = 0.5\nmissing = none\n")
    c = config_from_text(text)
    assert c.n_countries == 5 and c.year_range == (2001, 2009) and c.n_regions is None
    assert c.beta(FORWARD) == 1.5 and c.missing == {}
    i, j = VARIABLES.index(SECT_PROD), VARIABLES.index(SECT_WAGE)
    assert c.target_correlation[i, j] == c.target_correlation[j, i] == 0.5
    path = tmp_path / "c.txt"
    path.write_text("seed = 3\ncolour = blue\n")
    with pytest.raises(ConfigError, match=r"c.txt:2: unknown key"):
        read_config(path)
    path.write_text("seed = 3\nendogeneity_rho = high\n")
    with pytest.raises(ConfigError, match=r"c.txt:2:"):
        read_config(path)


def test_monte_carlo_deterministic_and_parallel_parity():
    config = SyntheticConfig(**SMALL, seed=11)
    spec = ModelSpec(endogenous=(FORWARD,))
    a = monte_carlo(config, spec, 4)
    b = monte_carlo(config, spec, 4)
    c = monte_carlo(config, spec, 4, jobs=2)
    assert a == b == c
    assert a.to_text() == c.to_text()
    assert a.n_failed == 0 and len(a.estimates) == 4


def test_monte_carlo_counts_failures():
    config = SyntheticConfig(**SMALL)
    spec = ModelSpec(endogenous=(FORWARD,), sample="eu_membership:old")
    s = monte_carlo(config, spec, 3)
    assert s.n_failed == 3 and s.failure_fraction == 1.0
    assert math.isnan(s.mean_estimate)


def test_monte_carlo_rejects_bad_arguments():
    config = SyntheticConfig(**SMALL)
    with pytest.raises(ValueError, match="at least two"):
        monte_carlo(config, ModelSpec(endogenous=(FORWARD,)), 1)
    with pytest.raises(ValueError, match="not a regressor"):
        monte_carlo(config, ModelSpec(endogenous=(FORWARD,)), 2, target=BACKWARD)


def test_invalid_instrument_column():
    config = SyntheticConfig(**SMALL, invalid_rho=0.5)
    panel = generate_calibrated(config, seed=2).panel
    assert "z_invalid" in panel
    assert isinstance(panel, PanelDataset)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="lag instruments are predetermined, not strictly exogenous: "
                                       "fixed effects leave an O(1/groups) bias near -0.024 at 50x50x4")
def test_planted_truth_bias_below_002():
    config = SyntheticConfig(n_countries=50, n_sectors=50, year_range=(2017, 2020), n_regions=None, missing={},
                             planted_beta={FORWARD: 0.9}, endogeneity_rho=0.5, seed=2024)
    s = monte_carlo(config, ModelSpec(endogenous=(FORWARD,)), 500, target=FORWARD, diagnostics=False)
    assert s.mean_n == 5000
    assert abs(s.bias) < 0.02
