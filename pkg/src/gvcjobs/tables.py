"""Rendering of regression ladders and descriptive tables as CSV or markdown."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass

from .estimator import INTERCEPT, EstimationResult
from .model import BACKWARD, FORWARD, N_REGIONS, POSITION, SECT_PROD, SECT_WAGE
from .panel import Correlogram, DescriptiveStats

PARTICIPATION = "gvc_participation"
LABELS = {
    PARTICIPATION: "GVC participation",
    FORWARD: "GVC participation forward",
    BACKWARD: "GVC participation backward",
    POSITION: "GVC position",
    "gdp_growth": "GDP growth rate",
    "log_gdp_pe": "Log of GDP per person employed",
    "educ_spend": "Government spending on education",
    "trade": "Trade",
    SECT_PROD: "Log of sectoral productivity",
    SECT_WAGE: "Log of sectoral average wage",
    N_REGIONS: "Number of regions affected",
    INTERCEPT: "Constant",
    "log_jobs": "Log of number of jobs created by FDI",
}
ROW_ORDER = (PARTICIPATION, FORWARD, BACKWARD, POSITION, "gdp_growth", "log_gdp_pe", "educ_spend",
             "trade", SECT_PROD, SECT_WAGE, N_REGIONS)
FOOTER = ("Observations", "R-squared", "KP rk LM p-value", "Hansen J p-value")
FAILED = "FAILED"


@dataclass
class ColumnOutcome:
    """A plan column: its result, or the stage-labelled failure message."""

    label: str
    result: EstimationResult | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.result is None


def fmt_coef(x: float) -> str:
    return f"{x:.3f}"


def fmt_p(p: float | None) -> str:
    return "NA" if p is None or (isinstance(p, float) and math.isnan(p)) else f"{p:.4f}"


def _row_names(outcomes) -> list[str]:
    """Regressor rows; forward and backward share one row unless a column has both."""
    used = set()
    merge = True
    for o in outcomes:
        if o.failed:
            continue
        names = set(o.result.spec.endogenous) | set(o.result.spec.controls)
        if FORWARD in names and BACKWARD in names:
            merge = False
        used |= {n for n in names if n in o.result.coefficients}
    if merge and (FORWARD in used or BACKWARD in used):
        used = (used - {FORWARD, BACKWARD}) | {PARTICIPATION}
    rows = [r for r in ROW_ORDER if r in used]
    rows += sorted(used - set(ROW_ORDER))
    return rows + [INTERCEPT]


def _lookup(result: EstimationResult, row: str):
    if row == PARTICIPATION:
        for name in (FORWARD, BACKWARD):
            if name in result.coefficients:
                return result.coefficients[name]
        return None
    return result.coefficients.get(row)


def result_grid(outcomes: list[ColumnOutcome]) -> list[list[str]]:
    """Header row, two rows per regressor (estimate, SE) and the footer rows."""
    grid = [[""] + [o.label for o in outcomes]]
    for row in _row_names(outcomes):
        est = [LABELS.get(row, row)]
        se = [""]
        for o in outcomes:
            c = None if o.failed else _lookup(o.result, row)
            if c is None:
                est.append(FAILED if o.failed and row == PARTICIPATION else "")
                se.append("")
            else:
                est.append(fmt_coef(c.estimate) + c.stars)
                se.append(f"({fmt_coef(c.se)})")
        grid += [est, se]
    for name in FOOTER:
        line = [name]
        for o in outcomes:
            r = o.result
            if r is None:
                line.append(FAILED)
            elif name == "Observations":
                line.append(str(r.n))
            elif name == "R-squared":
                line.append(fmt_coef(r.r_squared))
            elif name == "KP rk LM p-value":
                line.append(fmt_p(r.kp_lm_pvalue))
            else:
                line.append(fmt_p(r.hansen_j_pvalue))
        grid.append(line)
    if grid[1:] and all(o.failed for o in outcomes) and len(grid) == 1 + 2 + len(FOOTER):
        grid[1][1:] = [FAILED] * len(outcomes)
    return grid


def to_csv(grid) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(grid)
    return buf.getvalue()


def to_markdown(grid, title: str = "", notes=()) -> str:
    lines = []
    if title:
        lines += [f"### {title}", ""]
    header, body = grid[0], grid[1:]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|")
    for row in body:
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("Significance: * p<0.10, ** p<0.05, *** p<0.01 (two-sided, robust SE).")
    for note in notes:
        lines.append(f"- {note}")
    return "\n".join(lines) + "\n"


def render(grid, fmt: str, title: str = "", notes=()) -> str:
    if fmt == "csv":
        return to_csv(grid)
    if fmt == "markdown":
        return to_markdown(grid, title, notes)
    raise ValueError(f"unknown format {fmt!r}")


def render_results(outcomes: list[ColumnOutcome], fmt: str = "markdown", title: str = "") -> str:
    notes = [f"{o.label}: {o.error}" for o in outcomes if o.failed]
    return render(result_grid(outcomes), fmt, title, notes)


def _num(x: float, digits: int) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.{digits}f}"


def descriptive_grid(stats: DescriptiveStats, names) -> list[list[str]]:
    grid = [["Variable", "Obs.", "Mean", "Std.Dev.", "Min", "Max"]]
    for name in names:
        s = stats[name]
        grid.append([LABELS.get(name, name), str(s.count), _num(s.mean, 2), _num(s.sd, 2),
                     _num(s.min, 2), _num(s.max, 2)])
    return grid


def correlogram_grid(corr: Correlogram) -> list[list[str]]:
    """Lower-triangular correlation table."""
    names = corr.names
    grid = [[""] + [LABELS.get(n, n) for n in names]]
    for i, a in enumerate(names):
        row = [LABELS.get(a, a)]
        for j in range(len(names)):
            row.append(_num(float(corr.matrix[i, j]), 3) if j <= i else "")
        grid.append(row)
    return grid


def render_stats(stats: DescriptiveStats, corr: Correlogram, names, fmt: str = "markdown") -> str:
    desc = descriptive_grid(stats, names)
    cg = correlogram_grid(corr)
    if fmt == "csv":
        return to_csv(desc) + "\n" + to_csv(cg)
    return (to_markdown(desc, "Descriptive statistics").rsplit("Significance", 1)[0].rstrip() + "\n\n"
            + to_markdown(cg, "Correlogram").rsplit("Significance", 1)[0].rstrip() + "\n")

