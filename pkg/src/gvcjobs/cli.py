"""Command-line entry point: ingest, indicators, estimate, replicate, simulate, stats."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError
from .estimator import EstimationError, run_specification
from .indicators import indicator_panel
from .model import BUILTIN_PLANS, ModelSpec, ReplicationPlan, read_plan, read_spec
from .panel import DEFAULT_YEARS, PanelDataset, PanelError, correlate, describe
from .pipeline import SOURCE_FILES, SourceBundle, build_panel_from_sources
from .splits import read_partition
from .synthgen import VARIABLES, SyntheticConfig, generate_calibrated, monte_carlo, read_config
from .tables import ColumnOutcome, render_results, render_stats

log = logging.getLogger("gvcjobs")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_ENV = "GVC_PANEL_LOG"


class CliError(Exception):
    """Failure of a command stage; rendered as ``<stage>: <message>``."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def configure_logging(env=None) -> None:
    value = (os.environ if env is None else env).get(LOG_ENV, "").strip().lower()
    if value and value not in LOG_LEVELS:
        raise CliError("config", f"{LOG_ENV} must be one of {sorted(LOG_LEVELS)}, got {value!r}")
    level = LOG_LEVELS.get(value, logging.WARNING)
    root = logging.getLogger("gvcjobs")
    root.setLevel(level)
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.propagate = False


def parse_pair(text: str, what: str, cast=float) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise CliError("config", f"{what} must look like 'a,b', got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError:
        raise CliError("config", f"{what} must hold two numbers, got {text!r}") from None


def emit(text: str, out) -> None:
    """Write ``text`` to ``out`` or standard output."""
    if out is None or str(out) == "-":
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _partitions(items) -> dict:
    out = {}
    for item in items or ():
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise CliError("config", f"--partition takes name=path, got {item!r}")
        out[name.strip()] = read_partition(path.strip())
    return out


# --- commands ------------------------------------------------------------------


def cmd_ingest(source_dir, out=None, regional: bool = False, winsor=None,
               years: tuple[int, int] = DEFAULT_YEARS) -> PanelDataset:
    """Build the estimation panel from a directory of source files.

    ``fdi_projects.csv`` is required; the correspondence, accounts, macro
    and sectoral files are used when present.
    """
    d = Path(source_dir)
    paths = {name: d / fname for name, fname in SOURCE_FILES.items()}
    if not paths["projects"].is_file():
        raise CliError("ingest", f"no {SOURCE_FILES['projects']} in {d}")
    found = {k: (p if p.is_file() else None) for k, p in paths.items()}
    for name, p in found.items():
        if p is None:
            log.info("ingest: no %s file, skipping", name)
    sources = SourceBundle.read(found["projects"], found["correspondence"], found["accounts"],
                                found["macro"], found["sectoral"], years=years)
    result = build_panel_from_sources(sources, regional=regional, winsor=winsor)
    log.info("ingest: %d cells, %d quarantined records", result.panel.n, len(result.quarantined))
    if out is not None:
        io.write_panel(result.panel, out)
    return result.panel


def cmd_indicators(accounts_path, out=None) -> PanelDataset:
    panel, reasons = indicator_panel(io.read_accounts(accounts_path))
    for reason, count in sorted(reasons.items()):
        log.warning("indicators: %s in %d cells", reason, count)
    if out is not None:
        io.write_panel(panel, out)
    return panel


def cmd_estimate(panel: PanelDataset, spec: ModelSpec, out=None, fmt: str = "markdown",
                 partitions=None) -> str:
    label = spec.label or "(1)"
    result = run_specification(panel, spec, partitions)
    for w in result.warnings:
        log.warning("estimate: %s", w)
    text = render_results([ColumnOutcome(label, result)], fmt)
    emit(text, out)
    return text


def _run_column(args):
    panel, label, spec, partitions = args
    try:
        return ColumnOutcome(label, run_specification(panel, spec, partitions))
    except EstimationError as exc:
        return ColumnOutcome(label, error=str(exc))


@dataclass
class ReplicationOutput:
    outcomes: list[ColumnOutcome]
    text: str
    panel: PanelDataset


def synthetic_panel(config: SyntheticConfig, regional: bool = False) -> PanelDataset:
    if regional and config.n_regions is None:
        raise CliError("replicate", "plan needs region fixed effects but the config has n_regions = none")
    synth = generate_calibrated(config)
    return synth.regional if regional else synth.panel


def cmd_replicate(plan: ReplicationPlan, panel: PanelDataset | None = None,
                  config: SyntheticConfig | None = None, seed: int | None = None, out=None,
                  fmt: str | None = None, jobs: int = 1, partitions=None) -> ReplicationOutput:
    """Run every plan column; a failing column is reported, not fatal.

    Without ``panel`` a calibrated synthetic panel is drawn from ``config``
    (default settings when None) with ``seed`` overriding its seed. Columns
    run in parallel when ``jobs > 1``; the table keeps plan order.
    """
    if panel is None:
        config = config or SyntheticConfig()
        if seed is not None:
            config = replace(config, seed=seed)
        needs_region = any("region" in spec.fixed_effects for _, spec in plan.columns)
        panel = synthetic_panel(config, needs_region)
    tasks = [(panel, label, spec, partitions) for label, spec in plan.columns]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_column, tasks))
    else:
        outcomes = [_run_column(t) for t in tasks]
    for o in outcomes:
        if o.failed:
            log.warning("replicate: column %s FAILED (%s)", o.label, o.error)
    text = render_results(outcomes, fmt or plan.format, plan.title)
    target = out if out is not None else plan.out
    if target is not None:
        emit(text, target)
    return ReplicationOutput(outcomes, text, panel)


def cmd_simulate(config: SyntheticConfig, spec: ModelSpec, replications: int, out=None,
                 jobs: int = 1, target: str | None = None):
    target = target or (spec.endogenous + spec.controls)[0]
    summary = monte_carlo(config, spec, replications, jobs=jobs, target=target)
    emit(summary.to_text(), out)
    return summary


def cmd_stats(panel: PanelDataset, out=None, fmt: str = "markdown", variables=VARIABLES) -> str:
    names = [v for v in variables if v in panel]
    if not names:
        raise CliError("stats", "panel holds none of the requested variables")
    text = render_stats(describe(panel, names), correlate(panel, names), names, fmt)
    emit(text, out)
    return text


# --- argument handling ------------------------------------------------------------


def load_plan(name: str, fmt: str | None) -> ReplicationPlan:
    if name in BUILTIN_PLANS:
        plan = BUILTIN_PLANS[name]()
    elif Path(name).is_file():
        plan = read_plan(name)
    else:
        raise CliError("config", f"--plan {name!r} is neither a file nor one of {sorted(BUILTIN_PLANS)}")
    return replace(plan, format=fmt) if fmt else plan


def _load_config(path, seed):
    config = read_config(path) if path else SyntheticConfig()
    return replace(config, seed=seed) if seed is not None else config


def _load_panel(args) -> PanelDataset:
    if args.panel:
        return io.read_panel(args.panel)
    return synthetic_panel(_load_config(getattr(args, "config", None), args.seed),
                           getattr(args, "regional", False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gvcjobs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, fmt=False):
        if out:
            sp.add_argument("--out", help="output path (default: standard output)")
        if fmt:
            sp.add_argument("--format", choices=("csv", "markdown"), default=None)

    sp = sub.add_parser("ingest", help="source files to estimation panel")
    sp.add_argument("source_dir", help=f"directory holding {', '.join(SOURCE_FILES.values())}")
    sp.add_argument("--regional", action="store_true", help="keep regions as a panel dimension")
    sp.add_argument("--winsor", help="winsorize participation shares at quantiles lo,hi")
    sp.add_argument("--years", default=f"{DEFAULT_YEARS[0]},{DEFAULT_YEARS[1]}", help="first,last year kept")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("indicators", help="participation and position from national accounts")
    sp.add_argument("accounts")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("estimate", help="one specification")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--partition", action="append", metavar="NAME=PATH")
    common(sp, fmt=True)

    sp = sub.add_parser("replicate", help="run a plan of columns and emit one table")
    sp.add_argument("--plan", required=True, help=f"plan file or one of {', '.join(BUILTIN_PLANS)}")
    sp.add_argument("--panel", help="estimation panel (default: calibrated synthetic panel)")
    sp.add_argument("--config", help="synthetic panel configuration")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--partition", action="append", metavar="NAME=PATH")
    common(sp, fmt=True)

    sp = sub.add_parser("simulate", help="Monte Carlo on synthetic panels")
    sp.add_argument("--config")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--target", help="regressor to summarise (default: first endogenous)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)

    sp = sub.add_parser("stats", help="descriptive statistics and correlogram")
    sp.add_argument("--panel", help="panel file (default: calibrated synthetic panel)")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    common(sp, fmt=True)
    return p


def run(args) -> None:
    if getattr(args, "jobs", 1) < 1:
        raise CliError("config", "--jobs must be at least 1")
    if args.command == "ingest":
        winsor = parse_pair(args.winsor, "--winsor") if args.winsor else None
        years = parse_pair(args.years, "--years", int)
        cmd_ingest(args.source_dir, args.out, args.regional, winsor, years)
    elif args.command == "indicators":
        cmd_indicators(args.accounts, args.out)
    elif args.command == "estimate":
        cmd_estimate(io.read_panel(args.panel), read_spec(args.spec), args.out,
                     args.format or "markdown", _partitions(args.partition))
    elif args.command == "replicate":
        plan = load_plan(args.plan, args.format)
        panel = io.read_panel(args.panel) if args.panel else None
        config = _load_config(args.config, args.seed)
        result = cmd_replicate(plan, panel, config, out=args.out, jobs=args.jobs,
                               partitions=_partitions(args.partition))
        if args.out is None and plan.out is None:
            emit(result.text, None)
    elif args.command == "simulate":
        cmd_simulate(_load_config(args.config, args.seed), read_spec(args.spec), args.reps,
                     args.out, args.jobs, args.target)
    elif args.command == "stats":
        cmd_stats(_load_panel(args), args.out, args.format or "markdown")


def _stage(exc: Exception, command: str) -> str:
    if isinstance(exc, CliError):
        return str(exc)
    if isinstance(exc, ConfigError):
        return f"config: {exc}"
    if isinstance(exc, io.DataFormatError):
        return f"input: {exc}"
    if isinstance(exc, EstimationError):
        return f"{command}: {exc}"
    if isinstance(exc, OSError):
        return f"io: {exc}"
    return f"{command}: {type(exc).__name__}: {exc}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging()
        run(args)
    except (CliError, ConfigError, EstimationError, PanelError, OSError, ValueError, KeyError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"gvcjobs: {_stage(exc, args.command)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
