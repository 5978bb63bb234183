"""Source files to estimation panel: one code path for files and memory."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .indicators import indicator_panel
from .model import BACKWARD, FORWARD, POSITION
from .panel import DEFAULT_YEARS, FdiProjectRecord, PanelDataset, ingest_fdi_projects, join, log_transform, winsorize

log = logging.getLogger(__name__)

SOURCE_FILES = {
    "projects": "fdi_projects.csv",
    "correspondence": "sector_correspondence.csv",
    "accounts": "accounts.csv",
    "macro": "macro.csv",
    "sectoral": "sectoral.csv",
}
WINSORIZED = (FORWARD, BACKWARD)


@dataclass
class SourceBundle:
    """Raw inputs: project records, sector correspondence and covariate panels.

    ``macro`` is keyed by (country, year), ``accounts`` and ``sectoral`` by
    (country, sector, year). Any covariate panel may be None.
    """

    records: list[FdiProjectRecord]
    correspondence: dict[str, int] | None = None
    accounts: PanelDataset | None = None
    macro: PanelDataset | None = None
    sectoral: PanelDataset | None = None
    years: tuple[int, int] = DEFAULT_YEARS

    def write(self, directory) -> dict[str, Path]:
        d = io.ensure_dir(directory)
        paths = {"projects": d / SOURCE_FILES["projects"]}
        io.write_fdi_projects(self.records, paths["projects"])
        if self.correspondence is not None:
            paths["correspondence"] = d / SOURCE_FILES["correspondence"]
            io.write_correspondence(self.correspondence, paths["correspondence"])
        for name in ("accounts", "macro", "sectoral"):
            panel = getattr(self, name)
            if panel is not None:
                paths[name] = d / SOURCE_FILES[name]
                io.write_panel(panel, paths[name])
        return paths

    @classmethod
    def read(cls, projects, correspondence=None, accounts=None, macro=None, sectoral=None,
             years: tuple[int, int] = DEFAULT_YEARS) -> SourceBundle:
        return cls(
            records=io.read_fdi_projects(projects),
            correspondence=io.read_correspondence(correspondence) if correspondence else None,
            accounts=io.read_accounts(accounts) if accounts else None,
            macro=io.read_panel(macro) if macro else None,
            sectoral=io.read_panel(sectoral) if sectoral else None,
            years=years,
        )


@dataclass
class PipelineResult:
    panel: PanelDataset
    quarantined: list = field(default_factory=list)
    indicator_reasons: dict[str, int] = field(default_factory=dict)


def build_panel_from_sources(sources: SourceBundle, regional: bool = False,
                             winsor: tuple[float, float] | None = None) -> PipelineResult:
    """Aggregate projects, log jobs, attach indicators and covariates.

    Indicators come from the national-accounts panel, macro covariates are
    broadcast from country-year and sectoral covariates join on the full key.
    ``winsor`` clips the participation shares at the given quantiles.
    """
    ingest = ingest_fdi_projects(sources.records, sources.correspondence, regional=regional,
                                 years=sources.years)
    if ingest.quarantined:
        log.warning("quarantined %d project records", ingest.n_quarantined)
    panel = log_transform(ingest.panel, "jobs")
    reasons: dict[str, int] = {}
    if sources.accounts is not None:
        ind, reasons = indicator_panel(sources.accounts)
        for reason, count in sorted(reasons.items()):
            log.info("indicator masked (%s): %d cells", reason, count)
        keep = [c for c in ind.columns if c not in (FORWARD, BACKWARD, POSITION)]
        panel = join(panel, ind.drop_columns(keep), "key")
    if sources.macro is not None:
        panel = join(panel, sources.macro, "country-year")
    if sources.sectoral is not None:
        panel = join(panel, sources.sectoral, "key")
    if winsor is not None:
        for name in WINSORIZED:
            if name in panel:
                panel = winsorize(panel, name, *winsor)
    return PipelineResult(panel, ingest.quarantined, reasons)
