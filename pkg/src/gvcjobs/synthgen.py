"""Calibrated synthetic panels with planted coefficients and endogenous GVC terms.

Regressors are drawn from a Gaussian copula whose latent correlation is set so
that the observed margins reproduce target means, SDs and correlations.
Participation and position shares get lognormal margins (they are positive
and right-skewed); the remaining variables are normal. Every latent series is
a stationary AR(1) within its group, so lagged values are relevant
instruments, and the structural error is correlated only with the
contemporaneous innovations of the endogenous regressors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, parse_blocks, split_list
from .estimator import (
    DesignMatrices, EstimationError, build_design, ensure_lags, estimate_gmm_two_step,
    estimate_ols,
)
from .model import BACKWARD, FORWARD, LOG_JOBS, POSITION, SECT_PROD, SECT_WAGE, ModelSpec
from .panel import FdiProjectRecord, PanelDataset
from .pipeline import SourceBundle, build_panel_from_sources
from .splits import apply_sample

# Order of the descriptive-statistics and correlogram tables.
VARIABLES = (
    LOG_JOBS, FORWARD, BACKWARD, POSITION,
    "gdp_growth", "log_gdp_pe", "trade", "educ_spend", SECT_PROD, SECT_WAGE,
)
REGRESSORS = VARIABLES[1:]
MACRO = ("gdp_growth", "log_gdp_pe", "trade", "educ_spend")
SECTORAL = (FORWARD, BACKWARD, POSITION, SECT_PROD, SECT_WAGE)
LOGNORMAL = (FORWARD, BACKWARD, POSITION, "trade")
INVALID_INSTRUMENT = "z_invalid"

DEFAULT_MEANS = dict(zip(VARIABLES, (5.13, 0.67, 0.30, 1.00, 2.08, 11.47, 108.66, 5.00, 11.45, 21.22)))
DEFAULT_SDS = dict(zip(VARIABLES, (1.73, 0.42, 0.36, 0.26, 3.76, 0.34, 49.31, 1.09, 1.57, 2.19)))

_LOWER = (
    (),
    (0.229,),
    (-0.058, 0.024),
    (-0.065, -0.012, -0.070),
    (0.103, -0.064, 0.069, 0.020),
    (-0.222, 0.074, -0.085, 0.084, -0.269),
    (-0.258, 0.050, -0.028, 0.104, -0.203, 0.441),
    (-0.066, 0.215, 0.173, 0.021, 0.185, 0.071, -0.017),
    (0.078, 0.159, -0.002, -0.020, -0.087, 0.208, 0.291, 0.174),
    (0.2875, 0.1736, -0.2857, -0.0716, -0.1574, 0.2382, 0.1382, -0.1833, 0.7489),
)


def _default_correlation() -> np.ndarray:
    k = len(VARIABLES)
    R = np.eye(k)
    for i, row in enumerate(_LOWER):
        for j, v in enumerate(row):
            R[i, j] = R[j, i] = v
    return R


DEFAULT_CORRELATION = _default_correlation()

# Share of cells without a value, per variable (educ_spend is per country-year).
DEFAULT_MISSING = {FORWARD: 0.021, BACKWARD: 0.020, "educ_spend": 0.018, SECT_PROD: 0.232, SECT_WAGE: 0.227}
DEFAULT_BETA = {FORWARD: 0.9, BACKWARD: -1.1, POSITION: -0.7}

FIRST_SECTOR = 10


class CorrelationRepairError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    """Size, calibration targets and planted truth of a synthetic panel.

    ``target_correlation`` is indexed like :data:`VARIABLES`. The row of the
    dependent variable is informational: log-jobs correlations follow from
    the planted coefficients, the fixed effects and the error.
    ``n_regions`` is the largest number of destination regions a cell's jobs
    are split across (None: no regional detail).
    """

    n_countries: int = 27
    n_sectors: int = 21
    year_range: tuple[int, int] = (2003, 2020)
    n_regions: int | None = 5
    target_means: dict = field(default_factory=lambda: dict(DEFAULT_MEANS))
    target_sds: dict = field(default_factory=lambda: dict(DEFAULT_SDS))
    target_correlation: np.ndarray = field(default_factory=lambda: DEFAULT_CORRELATION.copy())
    planted_beta: dict = field(default_factory=lambda: dict(DEFAULT_BETA))
    endogenous: tuple[str, ...] = (FORWARD, BACKWARD)
    endogeneity_rho: float = 0.5
    instrument_strength: float = 0.7
    fe_scale: float = 0.25
    missing: dict = field(default_factory=lambda: dict(DEFAULT_MISSING))
    invalid_rho: float | None = None
    match_moments: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "year_range", tuple(int(y) for y in self.year_range))
        object.__setattr__(self, "endogenous", tuple(self.endogenous))
        R = np.asarray(self.target_correlation, dtype=float)
        object.__setattr__(self, "target_correlation", R)
        k = len(VARIABLES)
        if self.n_countries < 1 or self.n_sectors < 1:
            raise ValueError("need at least one country and one sector")
        if FIRST_SECTOR + self.n_sectors - 1 > 99:
            raise ValueError(f"at most {100 - FIRST_SECTOR} sectors fit two-digit codes")
        y0, y1 = self.year_range
        if y1 < y0:
            raise ValueError(f"empty year range {self.year_range}")
        if self.n_regions is not None and self.n_regions < 1:
            raise ValueError("n_regions must be positive or None")
        if R.shape != (k, k):
            raise ValueError(f"target_correlation must be {k}x{k}, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-12, rtol=0) or not np.allclose(np.diag(R), 1.0, atol=1e-12, rtol=0):
            raise ValueError("target_correlation must be symmetric with unit diagonal")
        if np.any(np.abs(R) > 1):
            raise ValueError("target correlations must lie in [-1, 1]")
        for name in VARIABLES:
            if name not in self.target_means or name not in self.target_sds:
                raise ValueError(f"missing target moments for {name!r}")
            if not self.target_sds[name] > 0:
                raise ValueError(f"target sd of {name!r} must be positive")
        for name in LOGNORMAL:
            if not self.target_means[name] > 0:
                raise ValueError(f"target mean of {name!r} must be positive")
        unknown = set(self.planted_beta) - set(REGRESSORS)
        if unknown:
            raise ValueError(f"planted betas for unknown regressors: {sorted(unknown)}")
        if not all(math.isfinite(b) for b in self.planted_beta.values()):
            raise ValueError("planted betas must be finite")
        bad_endo = set(self.endogenous) - set(SECTORAL[:3])
        if bad_endo or not self.endogenous:
            raise ValueError(f"endogenous set must be a non-empty subset of {SECTORAL[:3]}")
        if not -0.9 <= self.endogeneity_rho <= 0.9:
            raise ValueError("endogeneity_rho must lie in [-0.9, 0.9]")
        if not 0.0 < self.instrument_strength < 1.0:
            raise ValueError("instrument_strength must lie in (0, 1)")
        if self.fe_scale < 0:
            raise ValueError("fe_scale must be non-negative")
        for name, rate in self.missing.items():
            if name not in REGRESSORS or not 0.0 <= rate < 1.0:
                raise ValueError(f"bad missing rate {name}={rate}")
        if self.invalid_rho is not None and not -1.0 < self.invalid_rho < 1.0:
            raise ValueError("invalid_rho must lie in (-1, 1)")

    @property
    def n_years(self) -> int:
        return self.year_range[1] - self.year_range[0] + 1

    @property
    def n_cells(self) -> int:
        return self.n_countries * self.n_sectors * self.n_years

    def beta(self, name: str) -> float:
        return float(self.planted_beta.get(name, 0.0))


_SCALARS = {
    "n_countries": int, "n_sectors": int, "seed": int,
    "endogeneity_rho": float, "instrument_strength": float, "fe_scale": float,
}


def config_from_text(text: str, source: str = "<config>", base: SyntheticConfig | None = None) -> SyntheticConfig:
    """Parse ``key = value`` lines into a :class:`SyntheticConfig`.

    Besides the scalar fields, ``year_range = 2003, 2020``, ``endogenous = a, b``,
    ``n_regions = none``, ``missing = none``, ``invalid_rho``, and the per-variable
    keys ``beta.<var>``, ``mean.<var>``, ``sd.<var>``, ``missing.<var>`` and
    ``corr.<var>.<var>`` are accepted.
    """
    base = base or SyntheticConfig()
    blocks = parse_blocks(text, source)
    if len(blocks) > 1:
        raise ConfigError(source, blocks[1].line, "a synthetic config takes no [blocks]")
    kw = {}
    means, sds = dict(base.target_means), dict(base.target_sds)
    beta, missing = dict(base.planted_beta), dict(base.missing)
    R = base.target_correlation.copy()
    for key, (value, line) in blocks[0].entries.items():
        try:
            if key in _SCALARS:
                kw[key] = _SCALARS[key](value)
            elif key == "year_range":
                lo, hi = (int(v) for v in split_list(value))
                kw[key] = (lo, hi)
            elif key == "n_regions":
                kw[key] = None if value.lower() == "none" else int(value)
            elif key == "invalid_rho":
                kw[key] = None if value.lower() == "none" else float(value)
            elif key == "endogenous":
                kw[key] = split_list(value)
            elif key == "match_moments":
                if value.lower() not in ("true", "false"):
                    raise ValueError("match_moments must be true or false")
                kw[key] = value.lower() == "true"
            elif key == "missing":
                if value.lower() != "none":
                    raise ValueError("only 'missing = none' is accepted; use missing.<var> for rates")
                missing = {}
            elif "." in key:
                kind, _, rest = key.partition(".")
                if kind == "corr":
                    a, _, b = rest.partition(".")
                    i, j = VARIABLES.index(a), VARIABLES.index(b)
                    R[i, j] = R[j, i] = float(value)
                    continue
                store = {"beta": beta, "mean": means, "sd": sds, "missing": missing}[kind]
                if kind != "beta" and rest not in VARIABLES:
                    raise ValueError(f"unknown variable {rest!r}")
                store[rest] = float(value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(source, line, f"unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(source, line, str(exc)) from None
    try:
        return replace(base, target_means=means, target_sds=sds, planted_beta=beta,
                       missing=missing, target_correlation=R, **kw)
    except ValueError as exc:
        raise ConfigError(source, 0, str(exc)) from None


def read_config(path) -> SyntheticConfig:
    p = Path(path)
    return config_from_text(p.read_text(encoding="utf-8"), str(p))


# --- latent correlation ------------------------------------------------------


def _log_sigma(mean: float, sd: float) -> float:
    return math.sqrt(math.log1p((sd / mean) ** 2))


def latent_correlation(config: SyntheticConfig) -> np.ndarray:
    """Gaussian-copula correlation of the regressors reproducing the targets.

    For a lognormal ``exp(s Z1)`` and a normal ``Z2`` the observed correlation
    is ``r s / sqrt(exp(s^2) - 1)``; for two lognormals it is
    ``(exp(r s1 s2) - 1) / sqrt((exp(s1^2) - 1)(exp(s2^2) - 1))``. Both maps
    are inverted entrywise, then the matrix is repaired to be PSD.
    """
    idx = [VARIABLES.index(v) for v in REGRESSORS]
    target = config.target_correlation[np.ix_(idx, idx)]
    sig = {v: _log_sigma(config.target_means[v], config.target_sds[v]) for v in LOGNORMAL}
    k = len(REGRESSORS)
    R = np.eye(k)
    for i in range(k):
        for j in range(i):
            a, b = REGRESSORS[i], REGRESSORS[j]
            c = target[i, j]
            if a in sig and b in sig:
                s1, s2 = sig[a], sig[b]
                arg = 1.0 + c * math.sqrt(math.expm1(s1 * s1) * math.expm1(s2 * s2))
                r = math.log(arg) / (s1 * s2) if arg > 0 else -math.inf
            elif a in sig or b in sig:
                s = sig[a] if a in sig else sig[b]
                r = c * math.sqrt(math.expm1(s * s)) / s
            else:
                r = c
            R[i, j] = R[j, i] = float(np.clip(r, -1.0, 1.0))
    return repair_correlation(R)


def repair_correlation(R, floor: float = 1e-8) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to unit diagonal.

    Raises :class:`CorrelationRepairError` naming the most negative eigenvalue
    when the clipped matrix still fails a Cholesky factorisation.
    """
    R = 0.5 * (np.asarray(R, dtype=float) + np.asarray(R, dtype=float).T)
    vals, vecs = np.linalg.eigh(R)
    if vals.min() >= floor:
        return R
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    try:
        np.linalg.cholesky(fixed)
    except np.linalg.LinAlgError:
        raise CorrelationRepairError(
            f"target correlation is not repairable; most negative eigenvalue {vals.min():.6g}"
        ) from None
    return fixed


# --- generation --------------------------------------------------------------


@dataclass
class GroundTruth:
    """Planted quantities kept apart from the estimation panel."""

    beta: dict[str, float]
    intercept: float
    sigma_e: float
    fixed_effects: dict[str, dict]
    cells: PanelDataset = field(repr=False)


@dataclass
class SyntheticPanel:
    panel: PanelDataset
    truth: GroundTruth
    sources: SourceBundle | None = field(repr=False)
    regional: PanelDataset | None = field(default=None, repr=False)
    notes: list[str] = field(default_factory=list)

    def write_sources(self, directory) -> dict[str, Path]:
        if self.sources is None:
            raise ValueError("panel was generated without source records")
        return self.sources.write(directory)


def _ar1(rng, groups: tuple[int, ...], T: int, chol: np.ndarray, phi: float):
    """Stationary AR(1) paths with unit-variance margins and innovation corr ``chol chol'``.

    Returns shape ``groups + (T + 1, k)``; period 0 is a pre-sample draw.
    """
    k = chol.shape[0]
    draws = rng.standard_normal(groups + (T + 1, k)) @ chol.T
    x = np.empty_like(draws)
    x[..., 0, :] = draws[..., 0, :]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, T + 1):
        x[..., t, :] = phi * x[..., t - 1, :] + scale * draws[..., t, :]
    return x


def _innovations(x, phi: float):
    return (x[..., 1:, :] - phi * x[..., :-1, :]) / math.sqrt(1.0 - phi * phi)


def _recolor(flat, target):
    """Affine map giving ``flat`` zero sample mean and sample covariance ``target``."""
    mu = flat.mean(axis=0)
    S = np.cov(flat, rowvar=False, bias=True).reshape(flat.shape[1], flat.shape[1])
    Ls = np.linalg.cholesky(S)
    Lt = np.linalg.cholesky(target + 1e-14 * np.eye(len(target)))
    A = np.linalg.solve(Ls.T, Lt.T)
    return mu, A


def _margin(config: SyntheticConfig, name: str, z):
    mu, sd = config.target_means[name], config.target_sds[name]
    if name in LOGNORMAL:
        s = _log_sigma(mu, sd)
        return np.exp(math.log(mu) - 0.5 * s * s + s * z)
    return mu + sd * z


def _observed_error_corr(config: SyntheticConfig, cov_ue: np.ndarray) -> np.ndarray:
    """Correlation of each observed regressor with the unit structural error."""
    phi = config.instrument_strength
    out = math.sqrt(1.0 - phi * phi) * cov_ue
    for j, name in enumerate(REGRESSORS):
        if name in LOGNORMAL:
            s = _log_sigma(config.target_means[name], config.target_sds[name])
            out[j] *= s / math.sqrt(math.expm1(s * s))
    return out


def error_loadings(config: SyntheticConfig, R: np.ndarray):
    """Loadings of the structural error on the endogenous innovations.

    The endogenous innovations are first residualised on the exogenous
    regressors' innovations so that the error is orthogonal to every
    exogenous regressor. Returns ``(C, a, cov_ue)`` where ``C`` projects the
    exogenous innovations out, ``a`` loads the residual and ``cov_ue`` is the
    covariance of every regressor innovation with the error.
    """
    E = [REGRESSORS.index(v) for v in config.endogenous]
    X = [j for j in range(len(REGRESSORS)) if j not in E]
    C = np.linalg.solve(R[np.ix_(X, X)], R[np.ix_(X, E)])
    S = R[np.ix_(E, E)] - R[np.ix_(E, X)] @ C
    rho = config.endogeneity_rho
    ones = np.ones(len(E))
    w = np.linalg.solve(S, ones)
    load = rho * rho * float(ones @ w)
    if load >= 1.0:
        bound = 1.0 / math.sqrt(float(ones @ w))
        raise ValueError(
            f"endogeneity_rho={rho} is infeasible for endogenous set {config.endogenous}: "
            f"|rho| must be below {bound:.4f}"
        )
    a = rho * w
    resid_cov = R[:, E] - R[:, X] @ C
    return E, X, C, a, resid_cov @ a, load


def _labels(config: SyntheticConfig):
    countries = [f"C{i + 1:02d}" for i in range(config.n_countries)]
    sectors = list(range(FIRST_SECTOR, FIRST_SECTOR + config.n_sectors))
    years = list(range(config.year_range[0], config.year_range[1] + 1))
    return countries, sectors, years


def generate_calibrated(config: SyntheticConfig, seed=None, via_sources: bool = True) -> SyntheticPanel:
    """Draw a synthetic panel and push it through the source pipeline.

    The returned ``panel`` is exactly what ingestion of the exported source
    files produces. With ``via_sources=False`` the panel is assembled from
    the drawn arrays instead (no project records, no regional panel), which
    is what Monte Carlo runs use. ``seed`` overrides ``config.seed`` and may
    be a ``numpy.random.SeedSequence``.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    countries, sectors, years = _labels(config)
    nc, ns, T = len(countries), len(sectors), len(years)
    phi = config.instrument_strength

    R = latent_correlation(config)
    mi = [REGRESSORS.index(v) for v in MACRO]
    si = [REGRESSORS.index(v) for v in SECTORAL]
    Rmm = R[np.ix_(mi, mi)]
    B = np.linalg.solve(Rmm, R[np.ix_(mi, si)]).T
    Rres = R[np.ix_(si, si)] - B @ R[np.ix_(mi, si)]
    Rres = 0.5 * (Rres + Rres.T)
    E, X, C, a, cov_ue, load = error_loadings(config, R)

    macro = _ar1(rng, (nc,), T, np.linalg.cholesky(Rmm), phi)
    res = _ar1(rng, (nc, ns), T, np.linalg.cholesky(Rres + 1e-14 * np.eye(len(si))), phi)
    if config.match_moments:
        # Exact sample moments over the observed periods. Both maps are
        # affine and lower block-triangular, so macro series stay common to
        # all sectors of a country.
        mu, A = _recolor(macro[:, 1:].reshape(-1, len(mi)), Rmm)
        macro = (macro - mu) @ A
        m_cells = np.broadcast_to(macro[:, None], (nc, ns, T + 1, len(mi)))
        design = np.column_stack([np.ones(nc * ns * T), m_cells[:, :, 1:].reshape(-1, len(mi))])
        coef = np.linalg.lstsq(design, res[:, :, 1:].reshape(-1, len(si)), rcond=None)[0]
        res = res - coef[0] - m_cells @ coef[1:]
        mu, A = _recolor(res[:, :, 1:].reshape(-1, len(si)), Rres)
        res = (res - mu) @ A
    sect = macro[:, None, :, :] @ B.T + res

    # Full regressor latents per cell (with the pre-sample period), in REGRESSORS order.
    full = np.empty((nc, ns, T + 1, len(REGRESSORS)))
    full[..., mi] = macro[:, None]
    full[..., si] = sect
    U = _innovations(full, phi)
    Z = full[:, :, 1:]

    eta = rng.standard_normal((nc, ns, T))
    u_tilde = U[..., E] - U[..., X] @ C
    e = u_tilde @ a + math.sqrt(1.0 - load) * eta

    obs = {name: _margin(config, name, Z[..., j]) for j, name in enumerate(REGRESSORS)}

    sd_y = config.target_sds[LOG_JOBS]
    fe_sd = config.fe_scale * sd_y
    fe = {}
    for dim, levels in (("country", countries), ("sector", sectors), ("year", years)):
        draw = rng.normal(0.0, fe_sd, len(levels))
        if len(levels) > 1:
            draw -= draw.mean()
        fe[dim] = dict(zip(levels, draw.tolist()))
    fe_grid = (np.array(list(fe["country"].values()))[:, None, None]
               + np.array(list(fe["sector"].values()))[None, :, None]
               + np.array(list(fe["year"].values()))[None, None, :])

    beta = np.array([config.beta(v) for v in REGRESSORS])
    sds = np.array([config.target_sds[v] for v in REGRESSORS])
    means = np.array([config.target_means[v] for v in REGRESSORS])
    ridx = [VARIABLES.index(v) for v in REGRESSORS]
    Robs = config.target_correlation[np.ix_(ridx, ridx)]
    bs = beta * sds
    var_sys = float(bs @ Robs @ bs) + 3.0 * fe_sd * fe_sd
    cross = float(bs @ _observed_error_corr(config, cov_ue))
    notes = []
    gap = sd_y * sd_y - var_sys
    sigma_e = -cross + math.sqrt(max(cross * cross + gap, 0.0))
    floor = config.fe_scale * sd_y
    if sigma_e < floor:
        notes.append(f"error sd raised to {floor:.4g}: planted terms alone exceed the target variance")
        sigma_e = floor
    intercept = config.target_means[LOG_JOBS] - float(beta @ means)

    systematic = intercept + fe_grid
    for j, name in enumerate(REGRESSORS):
        if beta[j]:
            systematic = systematic + beta[j] * obs[name]
    y_star = systematic + sigma_e * e
    jobs = np.maximum(1.0, np.rint(np.exp(np.minimum(y_star, 30.0))))

    invalid = None
    if config.invalid_rho is not None:
        r = config.invalid_rho
        u_f = U[..., REGRESSORS.index(FORWARD)]
        lagged = np.concatenate([rng.standard_normal((nc, ns, 1)), u_f[:, :, :-1]], axis=2)
        invalid = math.sqrt(1.0 - r * r) * lagged + r * e

    sources, panel = _build_sources(config, rng, countries, sectors, years, obs, jobs, invalid, via_sources)
    regional = None
    if via_sources:
        panel = build_panel_from_sources(sources).panel
        if config.n_regions is not None:
            regional = build_panel_from_sources(sources, regional=True).panel

    cells_keys = {
        "country": np.repeat(countries, ns * T),
        "sector": np.tile(np.repeat(sectors, T), nc),
        "year": np.tile(years, nc * ns),
    }
    truth_cols = {
        "log_jobs_star": (y_star.ravel(), None),
        "error": ((sigma_e * e).ravel(), None),
    }
    for j in E:
        truth_cols[f"innovation_{REGRESSORS[j]}"] = (U[..., j].ravel(), None)
    truth = GroundTruth(
        beta={v: config.beta(v) for v in REGRESSORS},
        intercept=intercept,
        sigma_e=sigma_e,
        fixed_effects=fe,
        cells=PanelDataset(cells_keys, truth_cols),
    )
    return SyntheticPanel(panel, truth, sources, regional, notes)


def _build_sources(config, rng, countries, sectors, years, obs, jobs, invalid, with_records=True):
    """Source bundle and, without records, the panel assembled directly."""
    nc, ns, T = len(countries), len(sectors), len(years)
    miss = {name: rng.random((nc, ns, T)) < config.missing.get(name, 0.0)
            for name in (FORWARD, BACKWARD, SECT_PROD, SECT_WAGE)}
    educ_missing = rng.random((nc, T)) < config.missing.get("educ_spend", 0.0)

    # National-accounts aggregates whose ratios reproduce the indicators.
    va = np.exp(rng.normal(7.0, 1.0, (nc, ns, T)))
    y = va * rng.uniform(1.5, 3.0, (nc, ns, T))
    down = rng.uniform(1.5, 3.0, (nc, ns, T))
    ckeys = {
        "country": np.repeat(countries, ns * T),
        "sector": np.tile(np.repeat(sectors, T), nc),
        "year": np.tile(years, nc * ns),
    }
    accounts = PanelDataset(ckeys, {
        "v_gvc": ((obs[FORWARD] * va).ravel(), miss[FORWARD].ravel()),
        "va": (va.ravel(), None),
        "y_gvc": ((obs[BACKWARD] * y).ravel(), miss[BACKWARD].ravel()),
        "y": (y.ravel(), None),
        "upstreamness": ((obs[POSITION] * down).ravel(), None),
        "downstreamness": (down.ravel(), None),
    })
    sect_cols = {
        SECT_PROD: (obs[SECT_PROD].ravel(), miss[SECT_PROD].ravel()),
        SECT_WAGE: (obs[SECT_WAGE].ravel(), miss[SECT_WAGE].ravel()),
    }
    if invalid is not None:
        sect_cols[INVALID_INSTRUMENT] = (invalid.ravel(), None)
    sectoral = PanelDataset(ckeys, sect_cols)
    mkeys = {"country": np.repeat(countries, T), "year": np.tile(years, nc)}
    macro_cols = {}
    for name in MACRO:
        vals = obs[name][:, 0, :].ravel()
        macro_cols[name] = (vals, educ_missing.ravel() if name == "educ_spend" else None)
    macro = PanelDataset(mkeys, macro_cols)

    if not with_records:
        cols = {"jobs": (jobs.ravel(), None), LOG_JOBS: (np.log(jobs).ravel(), None)}
        for name in (FORWARD, BACKWARD, POSITION):
            cols[name] = (obs[name].ravel(), miss[name].ravel() if name in miss else None)
        for name, (vals, m) in macro_cols.items():
            rep = np.repeat(vals.reshape(nc, 1, T), ns, axis=1).ravel()
            cols[name] = (rep, None if m is None else np.repeat(m.reshape(nc, 1, T), ns, axis=1).ravel())
        cols.update(sect_cols)
        return None, PanelDataset(ckeys, cols)

    correspondence = {f"NACE {s:02d}": s for s in sectors}
    records = []
    flat_jobs = jobs.reshape(-1).astype(np.int64)
    for idx, (c, s, t) in enumerate(zip(ckeys["country"], ckeys["sector"], ckeys["year"])):
        total = int(flat_jobs[idx])
        raw = f"NACE {int(s):02d}"
        if config.n_regions is None:
            records.append(FdiProjectRecord(str(c), "", raw, int(t), total))
            continue
        k = int(rng.integers(1, config.n_regions + 1))
        chosen = np.sort(rng.choice(config.n_regions, size=k, replace=False))
        split = rng.multinomial(total, np.full(k, 1.0 / k))
        for r, part in zip(chosen, split):
            if part > 0:
                records.append(FdiProjectRecord(str(c), f"{c}-R{r + 1}", raw, int(t), int(part)))
    bundle = SourceBundle(records, correspondence, accounts, macro, sectoral,
                          years=(config.year_range[0], config.year_range[1]))
    return bundle, None


# --- simple cross-section design --------------------------------------------


def simple_iv_design(n: int, pi, rho: float = 0.5, n_instruments: int = 1,
                     beta: float = 1.0, seed=0, heteroskedastic: bool = False) -> DesignMatrices:
    """Cross-section ``y = beta x + w + e`` with ``x = z pi + v``, ``corr(e, v) = rho``.

    ``pi`` is a scalar applied to every instrument or a vector. Columns are
    ``X = [x, w, 1]`` and ``Z = [z_1..z_L, w, 1]``.
    """
    rng = np.random.default_rng(seed)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (n_instruments,))
    z = rng.standard_normal((n, n_instruments))
    w = rng.standard_normal(n)
    v = rng.standard_normal(n)
    e = rho * v + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    if heteroskedastic:
        e = e * np.sqrt(0.5 + z[:, 0] ** 2)
    x = z @ pi + 0.5 * w + v
    y = beta * x + w + 1.0 + e
    ones = np.ones(n)
    X = np.column_stack([x, w, ones])
    Z = np.column_stack([z, w, ones])
    zl = tuple(f"z{i + 1}" for i in range(n_instruments))
    return DesignMatrices(y, X, Z, ("x", "w", "_cons"), zl + ("w", "_cons"),
                          n_endog=1, n_excluded=n_instruments, rows=np.arange(n))


# --- Monte Carlo -------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloSummary:
    replications: int
    target: str
    true_value: float
    n_failed: int
    mean_estimate: float
    sd_estimate: float
    bias: float
    ols_mean: float
    ols_bias: float
    hansen_rejection: float
    kp_rejection: float
    mean_n: float
    level: float = 0.05
    estimates: tuple[float, ...] = field(default=(), repr=False)
    failures: tuple[str, ...] = field(default=(), repr=False)

    @property
    def failure_fraction(self) -> float:
        return self.n_failed / self.replications

    def to_text(self) -> str:
        rows = [
            ("replications", self.replications),
            ("target", self.target),
            ("true_value", self.true_value),
            ("failed", self.n_failed),
            ("failure_fraction", self.failure_fraction),
            ("mean_estimate", self.mean_estimate),
            ("sd_estimate", self.sd_estimate),
            ("bias", self.bias),
            ("ols_mean", self.ols_mean),
            ("ols_bias", self.ols_bias),
            (f"hansen_rejection_{self.level:g}", self.hansen_rejection),
            (f"kp_rejection_{self.level:g}", self.kp_rejection),
            ("mean_n", self.mean_n),
        ]
        out = []
        for k, v in rows:
            out.append(f"{k},{io.format_real(v) if isinstance(v, float) else v}")
        return "\n".join(out) + "\n"


def replicate_once(config: SyntheticConfig, spec: ModelSpec, seed, target: str, diagnostics: bool = True):
    """One Monte Carlo draw: (gmm estimate, ols estimate, hansen p, kp p, n).

    With ``diagnostics=False`` the two p-values are None.
    """
    from .diagnostics import hansen_j, kp_rk_lm

    synth = generate_calibrated(config, seed=seed, via_sources=False)
    panel = apply_sample(synth.panel, spec.sample)
    panel = ensure_lags(panel, spec)
    d = build_design(panel, spec)
    j = d.x_labels.index(target)
    fit = estimate_gmm_two_step(d, spec.covariance)
    ols = estimate_ols(d)
    if not diagnostics:
        return float(fit.beta[j]), float(ols.beta[j]), None, None, d.n
    hj = hansen_j(d, fit.beta)
    kp = kp_rk_lm(d, spec.covariance)
    return float(fit.beta[j]), float(ols.beta[j]), hj.pvalue, kp.pvalue, d.n


def _replicate_safe(args):
    config, spec, seed, target, diagnostics = args
    try:
        return replicate_once(config, spec, seed, target, diagnostics)
    except (EstimationError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return f"{type(exc).__name__}: {exc}"


def monte_carlo(config: SyntheticConfig, spec: ModelSpec, replications: int,
                jobs: int = 1, target: str = FORWARD, level: float = 0.05,
                diagnostics: bool = True) -> MonteCarloSummary:
    """Repeat generate-and-estimate with seeds spawned from ``config.seed``.

    Failed replications are counted, not fatal. Results are reduced in
    replication order, so the summary does not depend on ``jobs``. Rejection
    rates are NaN when ``diagnostics`` is off.
    """
    if replications < 2:
        raise ValueError("need at least two replications")
    if target not in spec.endogenous + spec.controls:
        raise ValueError(f"target {target!r} is not a regressor of the spec")
    seeds = np.random.SeedSequence(config.seed).spawn(replications)
    tasks = [(config, spec, s, target, diagnostics) for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_replicate_safe, tasks, chunksize=max(1, replications // (4 * jobs))))
    else:
        outcomes = [_replicate_safe(t) for t in tasks]

    ok = [o for o in outcomes if not isinstance(o, str)]
    failures = tuple(o for o in outcomes if isinstance(o, str))
    truth = config.beta(target)
    nan = math.nan
    if ok:
        est = np.array([o[0] for o in ok])
        ols = np.array([o[1] for o in ok])
        hp = [o[2] for o in ok if o[2] is not None]
        kp = [o[3] for o in ok if o[3] is not None]
        mean = float(est.mean())
        sd = float(est.std(ddof=1)) if len(est) > 1 else nan
        ols_mean = float(ols.mean())
        hansen = float(np.mean([p < level for p in hp])) if hp else nan
        kp_rate = float(np.mean([p < level for p in kp])) if kp else nan
        mean_n = float(np.mean([o[4] for o in ok]))
    else:
        est = np.zeros(0)
        mean = sd = ols_mean = hansen = kp_rate = mean_n = nan
    return MonteCarloSummary(
        replications=replications, target=target, true_value=truth,
        n_failed=len(failures), mean_estimate=mean, sd_estimate=sd, bias=mean - truth,
        ols_mean=ols_mean, ols_bias=ols_mean - truth, hansen_rejection=hansen,
        kp_rejection=kp_rate, mean_n=mean_n, level=level,
        estimates=tuple(float(v) for v in est), failures=failures,
    )
