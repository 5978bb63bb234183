from __future__ import annotations

import csv
import io

import pytest

from gvcjobs.estimator import run_specification, significance_stars
from gvcjobs.model import BACKWARD, FORWARD, ModelSpec, ReplicationPlan
from gvcjobs.panel import correlate, describe
from gvcjobs.synthgen import VARIABLES, SyntheticConfig, generate_calibrated
from gvcjobs.tables import (
    FAILED,
    FOOTER,
    LABELS,
    PARTICIPATION,
    ColumnOutcome,
    fmt_coef,
    fmt_p,
    render_results,
    render_stats,
    result_grid,
)


@pytest.fixture(scope="module")
def panel():
    return generate_calibrated(SyntheticConfig(n_countries=10, n_sectors=8, year_range=(2010, 2017)), seed=4).panel


@pytest.fixture(scope="module")
def outcomes(panel):
    specs = [("(1)", ModelSpec(endogenous=(FORWARD,))),
             ("(2)", ModelSpec(endogenous=(BACKWARD,), controls=("gdp_growth", "trade"))),
             ("(3)", ModelSpec(endogenous=(FORWARD,), lags=(1,)))]
    return [ColumnOutcome(label, run_specification(panel, spec)) for label, spec in specs]


def test_formatting():
    assert fmt_coef(0.9412) == "0.941"
    assert fmt_coef(-1.1644) == "-1.164"
    assert fmt_p(None) == "NA"
    assert fmt_p(float("nan")) == "NA"
    assert fmt_p(0.0) == "0.0000"
    assert fmt_p(0.04567) == "0.0457"


def test_participation_rows_merge(outcomes):
    grid = result_grid(outcomes)
    names = [row[0] for row in grid]
    assert LABELS[PARTICIPATION] in names
    assert LABELS[FORWARD] not in names and LABELS[BACKWARD] not in names
    assert grid[0] == ["", "(1)", "(2)", "(3)"]
    assert [row[0] for row in grid[-len(FOOTER):]] == list(FOOTER)


def test_separate_rows_when_both_in_one_column(panel):
    res = run_specification(panel, ModelSpec(endogenous=(FORWARD, BACKWARD)))
    names = [row[0] for row in result_grid([ColumnOutcome("(1)", res)])]
    assert LABELS[FORWARD] in names and LABELS[BACKWARD] in names


def test_stars_agree_with_pvalues(outcomes):
    grid = result_grid(outcomes)
    label_to_name = {v: k for k, v in LABELS.items()}
    for i in range(1, len(grid) - len(FOOTER), 2):
        name = label_to_name.get(grid[i][0], grid[i][0])
        for j, o in enumerate(outcomes, start=1):
            cell = grid[i][j]
            if not cell:
                continue
            res = o.result
            if name == PARTICIPATION:
                c = res[FORWARD] if FORWARD in res.coefficients else res[BACKWARD]
            else:
                c = res[name]
            stars = cell[len(cell.rstrip("*")):]
            assert stars == significance_stars(c.pvalue)
            assert cell.rstrip("*") == fmt_coef(c.estimate)
            assert grid[i + 1][j] == f"({fmt_coef(c.se)})"


def test_footer_values(outcomes):
    grid = result_grid(outcomes)
    foot = {row[0]: row[1:] for row in grid[-len(FOOTER):]}
    assert foot["Observations"] == [str(o.result.n) for o in outcomes]
    assert foot["Hansen J p-value"][2] == "NA"
    assert foot["KP rk LM p-value"][0] == fmt_p(outcomes[0].result.kp_lm_pvalue)


def test_failed_column_marked(outcomes):
    mixed = [outcomes[0], ColumnOutcome("(x)", error="sample: class empty"), outcomes[1]]
    grid = result_grid(mixed)
    assert grid[0][2] == "(x)"
    foot = grid[-len(FOOTER):]
    assert all(row[2] == FAILED for row in foot)
    text = render_results(mixed, "markdown")
    assert "(x): sample: class empty" in text
    assert render_results([ColumnOutcome("(x)", error="boom")], "csv").count(FAILED) >= len(FOOTER)


def test_csv_parses_and_markdown_shape(outcomes):
    text = render_results(outcomes, "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows == result_grid(outcomes)
    md = render_results(outcomes, "markdown", title="Demo")
    assert md.startswith("### Demo")
    assert "| --- |" not in md and "|---|---:|" in md
    with pytest.raises(ValueError):
        render_results(outcomes, "pdf")


def test_stats_layout(panel):
    names = list(VARIABLES)
    text = render_stats(describe(panel, names), correlate(panel, names), names, "csv")
    desc, corr = text.split("\n\n")
    desc_rows = list(csv.reader(io.StringIO(desc)))
    corr_rows = list(csv.reader(io.StringIO(corr)))
    assert len(desc_rows) == 1 + 10 and desc_rows[0][:3] == ["Variable", "Obs.", "Mean"]
    assert len(corr_rows) == 1 + 10 and all(len(r) == 11 for r in corr_rows)
    assert corr_rows[1][1] == "1.000" and corr_rows[1][2] == ""


def test_plan_labels_flow_to_table(panel):
    plan = ReplicationPlan((("a", ModelSpec(endogenous=(FORWARD,))), ("b", ModelSpec(endogenous=(FORWARD,)))))
    out = [ColumnOutcome(label, run_specification(panel, spec)) for label, spec in plan.columns]
    assert result_grid(out)[0] == ["", "a", "b"]
