"""Fixed-effects IV estimation: design matrices, 2SLS and two-step efficient GMM."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import norm

from . import numerics
from .model import CORRELATED_CONTROLS, ModelSpec
from .panel import PanelDataset, PanelError, lag
from .splits import apply_sample

log = logging.getLogger(__name__)

INTERCEPT = "_cons"
# Two-sided normal critical values for the 10/5/1% levels.
STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))
CRITICAL_T = {level: float(norm.isf(level / 2)) for level, _ in STAR_LEVELS}


class EstimationError(RuntimeError):
    """A stage of a specification run failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class CorrelatedControlsWarning(UserWarning):
    pass


@dataclass
class DesignMatrices:
    """Estimation arrays after listwise deletion.

    ``X = [endogenous | exogenous]`` and ``Z = [excluded | exogenous]`` share
    the trailing exogenous block (controls, dummies, intercept).
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    x_labels: tuple[str, ...]
    z_labels: tuple[str, ...]
    n_endog: int
    n_excluded: int
    rows: np.ndarray
    dropped: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def L(self) -> int:
        return self.Z.shape[1]

    @property
    def exog(self) -> np.ndarray:
        return self.X[:, self.n_endog:]

    @property
    def endog(self) -> np.ndarray:
        return self.X[:, :self.n_endog]

    @property
    def excluded(self) -> np.ndarray:
        return self.Z[:, :self.n_excluded]


def _residual_r(base: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Square matrix with the Gram matrix of ``cand`` residualised on ``base``.

    The trailing block of the (unpivoted) R factor of ``[base | cand]``
    represents the residuals exactly up to an orthogonal transform.
    """
    kb, kc = base.shape[1], cand.shape[1]
    if kb == 0:
        R = scipy.linalg.qr(cand, mode="r", check_finite=False)[0]
        return R[:kc, :kc]
    R = scipy.linalg.qr(np.hstack([base, cand]), mode="r", check_finite=False)[0]
    return R[kb:kb + kc, kb:kb + kc]


def _independent(resid_r: np.ndarray, scale: float) -> list[int]:
    """Greedy left-to-right selection, so earlier columns win ties.

    A column is kept when its residual on the columns already kept exceeds
    ``RANK_TOL * scale`` (two Gram-Schmidt passes for stability).
    """
    keep: list[int] = []
    basis = np.zeros((resid_r.shape[0], 0))
    cut = numerics.RANK_TOL * scale
    for j in range(resid_r.shape[1]):
        v = resid_r[:, j].copy()
        for _ in range(2):
            v -= basis @ (basis.T @ v)
        norm = float(np.linalg.norm(v))
        if norm > cut:
            keep.append(j)
            basis = np.column_stack([basis, v / norm])
    return keep


def _prune(base: np.ndarray, cand: np.ndarray, scale: float) -> list[int]:
    """Indices of ``cand`` columns linearly independent of ``base`` and each other."""
    if cand.shape[1] == 0:
        return []
    return _independent(_residual_r(base, cand), scale)


def _dummies(panel: PanelDataset, rows: np.ndarray, dims) -> tuple[np.ndarray, list[str]]:
    blocks, labels = [], []
    for dim in dims:
        if dim not in panel.dims:
            raise PanelError(f"fixed effect {dim!r} is not a key dimension of the panel")
        vals = panel.keys[dim][rows]
        levels = sorted(set(vals.tolist()))
        index = {v: i for i, v in enumerate(levels)}
        codes = np.array([index[v] for v in vals.tolist()], dtype=np.int64)
        block = np.zeros((len(rows), max(len(levels) - 1, 0)))
        hit = codes > 0
        block[np.flatnonzero(hit), codes[hit] - 1] = 1.0
        blocks.append(block)
        labels += [f"{dim}={v}" for v in levels[1:]]
    if not blocks:
        return np.zeros((len(rows), 0)), []
    return np.hstack(blocks), labels


def ensure_lags(panel: PanelDataset, spec: ModelSpec) -> PanelDataset:
    for var in spec.endogenous:
        for k in spec.lags:
            if f"{var}_lag{k}" not in panel:
                panel = lag(panel, var, k)
    return panel


def build_design(panel: PanelDataset, spec: ModelSpec) -> DesignMatrices:
    """Listwise-complete design with dummy-expanded fixed effects.

    Rows are put in key order, so the result does not depend on the row order
    of ``panel``. Collinear exogenous columns are dropped (dummies before
    controls) and recorded in ``dropped``.
    """
    lags = spec.lags
    if not spec.endogenous and spec.lags:
        lags = ()
    missing_vars = [v for v in spec.variables if v not in panel]
    if missing_vars:
        raise PanelError(f"variables not in panel: {missing_vars}")
    panel = ensure_lags(panel, spec)
    excluded_names = [f"{v}_lag{k}" for v in spec.endogenous for k in lags] + list(spec.instruments)

    used = [spec.dependent, *spec.endogenous, *spec.controls, *excluded_names]
    complete = np.ones(panel.n, dtype=bool)
    for name in used:
        complete &= ~panel.column(name).missing
    order = panel.sort_order()
    rows = order[complete[order]]
    n = len(rows)

    def cols(names):
        if not names:
            return np.zeros((n, 0))
        return np.column_stack([panel.column(v).values[rows] for v in names])

    y = panel.column(spec.dependent).values[rows]
    endog = cols(spec.endogenous)
    controls = cols(spec.controls)
    excluded = cols(excluded_names)
    dummies, dummy_labels = _dummies(panel, rows, spec.fixed_effects)
    const = np.ones((n, 1))
    if n == 0:
        raise EstimationError("design", "no complete observations")

    blocks = (const, controls, dummies, endog, excluded)
    scale = float(np.sqrt(max(np.max(np.sum(b * b, axis=0)) for b in blocks if b.shape[1])))
    kc, kd, ke = controls.shape[1], dummies.shape[1], endog.shape[1]
    dropped: list[str] = []

    # One unpivoted QR of [1 | controls | dummies | endog | excluded]: each
    # diagonal block of R represents that block residualised on everything
    # to its left. It is reused as long as no exogenous column was dropped;
    # otherwise the later blocks are refactored against the pruned columns.
    R = _residual_r(np.zeros((n, 0)), np.hstack(blocks))
    keep_c = _independent(R[1:1 + kc, 1:1 + kc], scale)
    if len(keep_c) == kc:
        keep_d = _independent(R[1 + kc:1 + kc + kd, 1 + kc:1 + kc + kd], scale)
    else:
        keep_d = _prune(np.hstack([const, controls[:, keep_c]]), dummies, scale)
    reuse = len(keep_c) == kc and len(keep_d) == kd
    dropped += [spec.controls[j] for j in range(kc) if j not in keep_c]
    controls = controls[:, keep_c]
    control_labels = [spec.controls[j] for j in keep_c]
    dropped += [dummy_labels[j] for j in range(kd) if j not in keep_d]
    dummies = dummies[:, keep_d]
    dummy_labels = [dummy_labels[j] for j in keep_d]
    if dropped:
        log.info("dropped collinear exogenous columns: %s", ", ".join(dropped))
        if any(name in spec.controls for name in dropped):
            log.warning("control variables absorbed as collinear: %s",
                        [d for d in dropped if d in spec.controls])

    exog = np.hstack([controls, dummies, const])
    exog_labels = control_labels + dummy_labels + [INTERCEPT]
    # The leading block belongs to the endogenous columns; the excluded
    # columns' residuals on the exogenous block alone are the trailing
    # columns of the full residual R.
    if reuse:
        start = 1 + kc + kd
        resid_r = R[start:, start:]
    else:
        resid_r = _residual_r(exog, np.hstack([endog, excluded]))
    keep_e = _independent(resid_r[:ke, :ke], scale)
    if len(keep_e) < ke:
        bad = [spec.endogenous[j] for j in range(ke) if j not in keep_e]
        raise EstimationError("design", f"endogenous regressors collinear with exogenous block: {bad}")
    keep_z = _independent(resid_r[:, ke:], scale)
    lost = [excluded_names[j] for j in range(excluded.shape[1]) if j not in keep_z]
    if lost:
        log.info("dropped collinear excluded instruments: %s", ", ".join(lost))
        dropped += lost
    excluded = excluded[:, keep_z]
    excluded_names = [excluded_names[j] for j in keep_z]

    X = np.hstack([endog, exog])
    Z = np.hstack([excluded, exog])
    if Z.shape[1] < X.shape[1]:
        raise EstimationError(
            "design",
            f"under-identified: {excluded.shape[1]} excluded instruments for "
            f"{endog.shape[1]} endogenous regressors",
        )
    if n <= Z.shape[1]:
        raise EstimationError("design", f"sample too small: n={n} but {Z.shape[1]} instrument columns")
    return DesignMatrices(
        y=y, X=X, Z=Z,
        x_labels=tuple(list(spec.endogenous) + exog_labels),
        z_labels=tuple(excluded_names + exog_labels),
        n_endog=endog.shape[1], n_excluded=excluded.shape[1],
        rows=rows, dropped=tuple(dropped),
    )


def _col_scaled(Z):
    norms = np.sqrt(np.sum(Z * Z, axis=0))
    norms[norms == 0] = 1.0
    return Z / norms


@dataclass
class LinearFit:
    beta: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray


def estimate_ols(d: DesignMatrices) -> LinearFit:
    beta, report = numerics.solve_least_squares(d.X, d.y)
    if report.dropped:
        raise EstimationError("ols", f"collinear regressors: {[d.x_labels[j] for j in report.dropped]}")
    fitted = d.X @ beta
    return LinearFit(beta, d.y - fitted, fitted)


def estimate_2sls(d: DesignMatrices) -> LinearFit:
    """``beta = (Xh'Xh)^-1 Xh'y`` with ``Xh`` the projection of X on Z.

    Computed as GMM with weight ``(Z'Z)^-1``: with ``L L' = Z'Z`` the
    estimate solves least squares of ``L^-1 Z'y`` on ``L^-1 Z'X``. When the
    Cholesky factor shows a pivot that is not clearly positive, the projection
    is redone by pivoted QR of Z, which either names the collinear instrument
    columns or supplies the coordinates for the second stage.
    """
    Zs = _col_scaled(d.Z)
    beta = _two_sls(d, Zs, d.X.T @ Zs, Zs.T @ d.y)
    fitted = d.X @ beta
    return LinearFit(beta, d.y - fitted, fitted)


# Relative Gram pivot below which the Cholesky route hands over to QR.
_GRAM_PIVOT_TOL = 1e-14


def _two_sls(d: DesignMatrices, Zs, A, b):
    G = Zs.T @ Zs
    L, _, smallest = numerics._cholesky(G)
    if L is not None and smallest > _GRAM_PIVOT_TOL * float(np.max(np.diag(G))):
        beta, _, rep = _weighted_solve(A, b, L)
    else:
        coords, zrep = numerics.qr_coordinates(Zs, np.column_stack([d.X, d.y]))
        if zrep.dropped:
            raise EstimationError("2sls", f"instrument matrix rank deficient in {[d.z_labels[j] for j in zrep.dropped]}")
        beta, rep = numerics.solve_least_squares(coords[:, :-1], coords[:, -1])
    if rep.dropped:
        names = [d.x_labels[j] for j in rep.dropped]
        raise EstimationError("2sls", f"first stage rank deficient; not identified by the instruments: {names}")
    return beta


def _moment_cov(Zs, e, hc: str, k: int):
    """``sum_i z_i z_i' e_i^2`` with the optional n/(n-k) correction."""
    U = Zs * e[:, None]
    S = U.T @ U
    n = Zs.shape[0]
    if hc == "HC1":
        S *= n / (n - k)
    return S


@dataclass
class GmmFit:
    beta: np.ndarray
    vcov: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray
    first_step: np.ndarray
    chol_S: np.ndarray = field(repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))


def _weighted_solve(A, b, L):
    """GMM step with weight ``(L L')^-1``: least squares of L^-1 A' on L^-1 b."""
    G = scipy.linalg.solve_triangular(L, A.T, lower=True)
    h = scipy.linalg.solve_triangular(L, b, lower=True)
    beta, rep = numerics.solve_least_squares(G, h)
    return beta, G, rep


def _bread_inverse(G):
    # (G'G)^-1 through the R factor of G.
    R = np.linalg.qr(G, mode="r")
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    V = Rinv @ Rinv.T
    return 0.5 * (V + V.T)


def estimate_gmm_two_step(d: DesignMatrices, covariance: str = "HC1") -> GmmFit:
    """Two-step efficient GMM with heteroskedasticity-robust weighting.

    Step one takes 2SLS residuals to build ``S = sum z z' e^2``; step two
    minimises the quadratic form in ``S^-1``. The covariance
    ``(X'Z S^-1 Z'X)^-1`` uses ``S`` rebuilt from the second-step residuals.
    """
    Zs = _col_scaled(d.Z)
    A = d.X.T @ Zs
    b = Zs.T @ d.y
    first = _two_sls(d, Zs, A, b)
    try:
        L1 = numerics.cholesky_pd(_moment_cov(Zs, d.y - d.X @ first, covariance, d.k))
        beta, _, rep = _weighted_solve(A, b, L1)
        if rep.dropped:
            raise EstimationError("gmm", f"weighted normal equations rank deficient: "
                                         f"{[d.x_labels[j] for j in rep.dropped]}")
        fitted = d.X @ beta
        resid = d.y - fitted
        L2 = numerics.cholesky_pd(_moment_cov(Zs, resid, covariance, d.k))
    except numerics.NumericalError as exc:
        raise EstimationError("gmm", f"weighting matrix: {exc}") from None
    G2 = scipy.linalg.solve_triangular(L2, A.T, lower=True)
    vcov = _bread_inverse(G2)
    return GmmFit(beta, vcov, resid, fitted, first, L2)


def r_squared(y, fitted) -> float:
    """``1 - SSR/SST`` with centred SST; negative values are possible for IV."""
    y = np.asarray(y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two observations")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise ValueError("dependent variable has zero variance")
    return 1.0 - float(np.sum((y - fitted) ** 2)) / sst


def significance_stars(pvalue: float) -> str:
    for level, stars in STAR_LEVELS:
        if pvalue < level:
            return stars
    return ""


@dataclass(frozen=True)
class Coefficient:
    estimate: float
    se: float
    t: float
    pvalue: float
    stars: str


@dataclass
class EstimationResult:
    spec: ModelSpec
    coefficients: dict[str, Coefficient]
    r_squared: float
    n: int
    kp_lm_stat: float | None
    kp_lm_dof: int | None
    kp_lm_pvalue: float | None
    hansen_j_stat: float
    hansen_j_dof: int
    hansen_j_pvalue: float | None
    dropped: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)
    rows: list[tuple] | None = field(default=None, repr=False)

    @property
    def negative_r2(self) -> bool:
        return self.r_squared < 0

    def __getitem__(self, name: str) -> Coefficient:
        return self.coefficients[name]


def coefficient_table(labels, beta, se) -> dict[str, Coefficient]:
    out = {}
    for name, b, s in zip(labels, beta, se):
        t = b / s if s > 0 else math.nan
        p = numerics.normal_two_sided_p(t) if s > 0 else math.nan
        out[name] = Coefficient(float(b), float(s), float(t), float(p), significance_stars(p) if s > 0 else "")
    return out


def _check_correlated_controls(spec: ModelSpec) -> list[str]:
    notes = []
    regressors = set(spec.controls) | set(spec.endogenous)
    for a, b in CORRELATED_CONTROLS:
        if a in regressors and b in regressors:
            msg = (f"{a} and {b} are highly correlated; consider separate "
                   f"regressions")
            warnings.warn(msg, CorrelatedControlsWarning, stacklevel=3)
            log.warning(msg)
            notes.append(msg)
    return notes


def run_specification(panel: PanelDataset, spec: ModelSpec, partitions=None) -> EstimationResult:
    """Sample filter, lags, design, GMM and diagnostics for one column."""
    from .diagnostics import hansen_j, kp_rk_lm

    notes = _check_correlated_controls(spec)
    if not spec.endogenous and spec.lags:
        msg = "no endogenous regressors: instrument lags ignored"
        log.warning(msg)
        notes.append(msg)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EstimationError:
            raise
        except (ValueError, KeyError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise EstimationError(name, str(exc)) from exc

    sample = stage("sample", apply_sample, panel, spec.sample, partitions)
    sample = stage("lags", ensure_lags, sample, spec)
    d = stage("design", build_design, sample, spec)
    fit = stage("gmm", estimate_gmm_two_step, d, spec.covariance)
    hj = stage("diagnostics", hansen_j, d, fit.beta)
    kp = stage("diagnostics", kp_rk_lm, d, spec.covariance) if d.n_endog else None
    r2 = stage("gmm", r_squared, d.y, fit.fitted)
    if r2 < 0:
        notes.append("negative R-squared (possible with IV estimates)")
    return EstimationResult(
        spec=spec,
        coefficients=coefficient_table(d.x_labels, fit.beta, fit.se),
        r_squared=r2,
        n=d.n,
        kp_lm_stat=kp.stat if kp else None,
        kp_lm_dof=kp.dof if kp else None,
        kp_lm_pvalue=kp.pvalue if kp else None,
        hansen_j_stat=hj.stat,
        hansen_j_dof=hj.dof,
        hansen_j_pvalue=hj.pvalue,
        dropped=d.dropped,
        warnings=notes,
        rows=[tuple(sample.keys[dim][i] for dim in sample.dims) for i in d.rows],
    )
