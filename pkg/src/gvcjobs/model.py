"""Regression column specifications and replication plans."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .config import Block, ConfigError, parse_blocks, read_blocks, split_list

LOG_JOBS = "log_jobs"
FORWARD = "gvc_forward"
BACKWARD = "gvc_backward"
POSITION = "gvc_position"
MACRO_CONTROLS = ("gdp_growth", "log_gdp_pe", "educ_spend", "trade")
SECT_PROD = "log_sect_prod"
SECT_WAGE = "log_sect_wage"
N_REGIONS = "n_regions"

FE_DIMS = ("sector", "country", "year", "region")
COVARIANCES = ("HC0", "HC1")
SPEC_KEYS = (
    "label", "dependent", "endogenous", "controls", "lags", "fixed_effects",
    "sample", "covariance", "instruments",
)

# Pairs that should not enter one regression together.
CORRELATED_CONTROLS = ((SECT_PROD, SECT_WAGE),)


@dataclass(frozen=True)
class ModelSpec:
    """One regression column.

    ``lags`` are applied to every endogenous regressor to build the excluded
    instruments; ``instruments`` adds further excluded instruments by name.
    ``sample`` is ``partition:class`` or None for the full panel.
    """

    dependent: str = LOG_JOBS
    endogenous: tuple[str, ...] = ()
    controls: tuple[str, ...] = ()
    lags: tuple[int, ...] = (1, 2)
    fixed_effects: tuple[str, ...] = ("sector", "country", "year")
    sample: str | None = None
    covariance: str = "HC1"
    instruments: tuple[str, ...] = ()
    label: str = ""

    def __post_init__(self):
        for name in ("endogenous", "controls", "lags", "fixed_effects", "instruments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        regressors = self.endogenous + self.controls
        if self.dependent in regressors:
            raise ValueError(f"dependent variable {self.dependent!r} is also a regressor")
        both = set(self.endogenous) & set(self.controls)
        if both:
            raise ValueError(f"variables both endogenous and control: {sorted(both)}")
        if len(set(regressors)) != len(regressors):
            raise ValueError("regressors listed twice")
        if any(k < 1 for k in self.lags):
            raise ValueError(f"instrument lags must be positive, got {self.lags}")
        if self.endogenous and not self.lags and not self.instruments:
            raise ValueError("endogenous regressors need at least one instrument lag")
        bad_fe = set(self.fixed_effects) - set(FE_DIMS)
        if bad_fe:
            raise ValueError(f"unknown fixed-effect dimensions: {sorted(bad_fe)}")
        if self.covariance not in COVARIANCES:
            raise ValueError(f"covariance must be one of {COVARIANCES}, got {self.covariance!r}")
        if self.sample is not None and ":" not in self.sample:
            raise ValueError(f"sample must look like 'partition:class', got {self.sample!r}")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.dependent,) + self.endogenous + self.controls + self.instruments

    def lag_columns(self) -> tuple[str, ...]:
        return tuple(f"{v}_lag{k}" for v in self.endogenous for k in self.lags)

    def to_text(self) -> str:
        lines = [
            f"label = {self.label}",
            f"dependent = {self.dependent}",
            f"endogenous = {', '.join(self.endogenous)}",
            f"controls = {', '.join(self.controls)}",
            f"lags = {', '.join(str(k) for k in self.lags)}",
            f"fixed_effects = {', '.join(self.fixed_effects)}",
            f"covariance = {self.covariance}",
            f"instruments = {', '.join(self.instruments)}",
        ]
        if self.sample:
            lines.append(f"sample = {self.sample}")
        return "\n".join(lines) + "\n"


def _spec_kwargs(entries: dict[str, tuple[str, int]], source: str) -> dict:
    kwargs = {}
    for key, (value, line) in entries.items():
        if key not in SPEC_KEYS:
            raise ConfigError(source, line, f"unknown key {key!r}")
        if key in ("endogenous", "controls", "fixed_effects", "instruments"):
            kwargs[key] = split_list(value)
        elif key == "lags":
            try:
                kwargs[key] = tuple(int(v) for v in split_list(value))
            except ValueError:
                raise ConfigError(source, line, f"lags must be integers, got {value!r}") from None
        elif key == "sample":
            kwargs[key] = value or None
        else:
            kwargs[key] = value
    return kwargs


def _build_spec(kwargs: dict, source: str, line: int) -> ModelSpec:
    try:
        return ModelSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(source, line, str(exc)) from None


def spec_from_text(text: str, source: str = "<spec>") -> ModelSpec:
    blocks = parse_blocks(text, source)
    if len(blocks) > 1:
        raise ConfigError(source, blocks[1].line, "a model spec file takes no [blocks]")
    entries = blocks[0].entries
    return _build_spec(_spec_kwargs(entries, source), source, 1)


def read_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_text(fh.read(), str(path))


@dataclass(frozen=True)
class ReplicationPlan:
    columns: tuple[tuple[str, ModelSpec], ...]
    format: str = "markdown"
    title: str = ""
    out: str | None = None
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        labels = [label for label, _ in self.columns]
        if len(set(labels)) != len(labels):
            raise ValueError(f"plan column labels must be unique: {labels}")
        if self.format not in ("csv", "markdown"):
            raise ValueError(f"format must be csv or markdown, got {self.format!r}")


PLAN_KEYS = ("format", "title", "out")


def plan_from_blocks(blocks: list[Block], source: str) -> ReplicationPlan:
    pre = blocks[0]
    defaults = {k: v for k, v in pre.entries.items() if k not in PLAN_KEYS}
    columns = []
    for block in blocks[1:]:
        entries = dict(defaults)
        entries.update(block.entries)
        entries.setdefault("label", (block.name, block.line))
        columns.append((block.name, _build_spec(_spec_kwargs(entries, source), source, block.line)))
    if not columns:
        raise ConfigError(source, pre.line, "plan defines no [columns]")
    fmt = pre.get("format", "markdown")
    try:
        return ReplicationPlan(tuple(columns), format=fmt, title=pre.get("title", ""), out=pre.get("out"))
    except ValueError as exc:
        raise ConfigError(source, pre.entries.get("format", ("", 0))[1], str(exc)) from None


def read_plan(path) -> ReplicationPlan:
    return plan_from_blocks(read_blocks(path), str(path))


# --- built-in ladders --------------------------------------------------------


def ladder(participation: str, extra_controls=(), fixed_effects=("sector", "country", "year"), sample=None):
    """Five nested columns adding regressors group by group."""
    steps = [
        ((participation,), ()),
        ((participation, POSITION), ()),
        ((participation, POSITION), MACRO_CONTROLS),
        ((participation, POSITION), MACRO_CONTROLS + (SECT_PROD,)),
        ((participation, POSITION), MACRO_CONTROLS + (SECT_WAGE,)),
    ]
    return [
        ModelSpec(endogenous=endo, controls=tuple(ctrl) + tuple(extra_controls),
                  fixed_effects=tuple(fixed_effects), sample=sample)
        for endo, ctrl in steps
    ]


def _labelled(specs, start=1):
    out = []
    for i, spec in enumerate(specs, start=start):
        label = f"({i})"
        out.append((label, replace(spec, label=label)))
    return tuple(out)


def table1_plan(fmt: str = "markdown") -> ReplicationPlan:
    specs = ladder(FORWARD) + ladder(BACKWARD)
    return ReplicationPlan(_labelled(specs), format=fmt, title="Baseline results")


def table2_plan(fmt: str = "markdown") -> ReplicationPlan:
    fe = ("region", "sector", "country", "year")
    specs = ladder(FORWARD, fixed_effects=fe) + ladder(BACKWARD, fixed_effects=fe)
    return ReplicationPlan(_labelled(specs), format=fmt, title="Regional variation")


def table3_plan(fmt: str = "markdown") -> ReplicationPlan:
    specs = ladder(FORWARD, extra_controls=(N_REGIONS,)) + ladder(BACKWARD, extra_controls=(N_REGIONS,))
    return ReplicationPlan(_labelled(specs), format=fmt, title="Regional variation (number of regions)")


TABLE4_SPLITS = (
    ("eu_membership", ("old", "new")),
    ("factor_intensity", ("labor", "capital")),
    ("tech_intensity", ("high", "medium", "low")),
)


def table4_plan(fmt: str = "markdown") -> ReplicationPlan:
    columns = []
    for participation, tag in ((FORWARD, "fwd"), (BACKWARD, "bwd")):
        for partition, classes in TABLE4_SPLITS:
            for cls in classes:
                label = f"{cls} {tag}"
                spec = ModelSpec(
                    endogenous=(participation, POSITION), controls=MACRO_CONTROLS,
                    sample=f"{partition}:{cls}", label=label,
                )
                columns.append((label, spec))
    return ReplicationPlan(tuple(columns), format=fmt, title="Sectoral and geographic variation")


BUILTIN_PLANS = {
    "table1": table1_plan,
    "table2": table2_plan,
    "table3": table3_plan,
    "table4": table4_plan,
}
