"""Panel data model, FDI project aggregation and variable transforms."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

KEY_DIMS = ("country", "region", "sector", "year")
DEFAULT_YEARS = (2003, 2020)
JOIN_LEVELS = {
    "key": ("country", "sector", "year"),
    "country-year": ("country", "year"),
    "sector-year": ("sector", "year"),
}


class PanelError(ValueError):
    pass


class ObsKey(NamedTuple):
    country: str | None
    sector: int | None
    year: int | None
    region: str | None = None


@dataclass(frozen=True)
class Column:
    values: np.ndarray
    missing: np.ndarray

    def as_float(self) -> np.ndarray:
        """Values with NaN in missing slots (a copy)."""
        out = self.values.astype(float, copy=True)
        out[self.missing] = np.nan
        return out

    @property
    def observed(self) -> np.ndarray:
        return self.values[~self.missing]


def normalize_region(label: str | None) -> str:
    return "" if label is None else " ".join(label.split()).casefold()


class PanelDataset:
    """Rectangular panel keyed by a subset of (country, region, sector, year).

    Key arrays live in ``keys``; variables live in ``columns`` as
    :class:`Column` pairs of values and a missing mask. Missing slots hold 0.0,
    never NaN. Instances are treated as immutable: every transform returns a
    new panel sharing the untouched arrays.
    """

    def __init__(self, keys: Mapping[str, Sequence], columns=None, notes=None):
        dims = tuple(d for d in KEY_DIMS if d in keys)
        unknown = set(keys) - set(KEY_DIMS)
        if unknown:
            raise PanelError(f"unknown key dimensions: {sorted(unknown)}")
        if not dims:
            raise PanelError("a panel needs at least one key dimension")
        arrays = {}
        for d in dims:
            if d in ("sector", "year"):
                arrays[d] = np.asarray(keys[d], dtype=np.int64)
            else:
                arrays[d] = np.asarray(keys[d], dtype=object)
        n = len(arrays[dims[0]])
        if any(len(a) != n for a in arrays.values()):
            raise PanelError("key arrays differ in length")
        self.dims = dims
        self.keys = arrays
        self.n = n
        self.columns: dict[str, Column] = {}
        self.notes: dict[str, str] = dict(notes or {})
        for name, col in (columns or {}).items():
            self.columns[name] = _as_column(col, n, name)
        self._check_unique()

    def _check_unique(self) -> None:
        if self.n == 0:
            return
        codes = self.key_codes(self.dims)
        if len(np.unique(codes)) != self.n:
            counts = Counter(codes.tolist())
            dup = [i for i, c in enumerate(codes) if counts[c] > 1][:5]
            raise PanelError(f"duplicate panel keys, e.g. {[self.key(i) for i in dup]}")

    def __len__(self) -> int:
        return self.n

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __repr__(self) -> str:
        return f"PanelDataset(n={self.n}, dims={self.dims}, columns={list(self.columns)})"

    def key(self, i: int) -> ObsKey:
        get = self.keys.get
        return ObsKey(
            country=get("country")[i] if "country" in self.keys else None,
            sector=int(get("sector")[i]) if "sector" in self.keys else None,
            year=int(get("year")[i]) if "year" in self.keys else None,
            region=get("region")[i] if "region" in self.keys else None,
        )

    def iter_keys(self) -> Iterable[ObsKey]:
        return (self.key(i) for i in range(self.n))

    def column(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise PanelError(f"no column named {name!r}") from None

    def values(self, name: str) -> np.ndarray:
        return self.column(name).as_float()

    def key_codes(self, dims: Sequence[str]) -> np.ndarray:
        """Dense integer code per row for the combination of ``dims``."""
        if not dims:
            return np.zeros(self.n, dtype=np.int64)
        codes = np.zeros(self.n, dtype=np.int64)
        for d in dims:
            if d not in self.keys:
                raise PanelError(f"panel has no key dimension {d!r}")
            levels, inv = np.unique(self.keys[d].astype(str) if d in ("country", "region")
                                    else self.keys[d], return_inverse=True)
            codes = codes * len(levels) + inv
        return np.unique(codes, return_inverse=True)[1].astype(np.int64)

    def sort_order(self) -> np.ndarray:
        """Row order sorting keys lexicographically by ``dims``."""
        cols = []
        for d in reversed(self.dims):
            a = self.keys[d]
            cols.append(np.unique(a.astype(str), return_inverse=True)[1] if a.dtype == object else a)
        return np.lexsort(cols) if cols else np.arange(self.n)

    def with_column(self, name: str, values, missing=None, note: str | None = None) -> PanelDataset:
        out = self._shallow()
        out.columns[name] = _as_column((values, missing), self.n, name)
        if note:
            out.notes[name] = note
        return out

    def drop_columns(self, names: Iterable[str]) -> PanelDataset:
        out = self._shallow()
        for name in names:
            out.columns.pop(name, None)
            out.notes.pop(name, None)
        return out

    def take(self, index) -> PanelDataset:
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        keys = {d: self.keys[d][index] for d in self.dims}
        cols = {
            name: Column(c.values[index], c.missing[index]) for name, c in self.columns.items()
        }
        return PanelDataset(keys, cols, self.notes)

    def _shallow(self) -> PanelDataset:
        out = PanelDataset.__new__(PanelDataset)
        out.dims = self.dims
        out.keys = self.keys
        out.n = self.n
        out.columns = dict(self.columns)
        out.notes = dict(self.notes)
        return out

    def equals(self, other: PanelDataset) -> bool:
        if self.dims != other.dims or self.n != other.n or set(self.columns) != set(other.columns):
            return False
        if any(not np.array_equal(self.keys[d], other.keys[d]) for d in self.dims):
            return False
        for name, c in self.columns.items():
            o = other.columns[name]
            if not np.array_equal(c.missing, o.missing):
                return False
            if not np.array_equal(c.values[~c.missing], o.values[~o.missing]):
                return False
        return True


def _as_column(col, n: int, name: str) -> Column:
    if isinstance(col, Column):
        values, missing = col.values, col.missing
    else:
        values, missing = col
    values = np.asarray(values, dtype=float)
    if values.shape != (n,):
        raise PanelError(f"column {name!r} has shape {values.shape}, expected ({n},)")
    if missing is None:
        missing = ~np.isfinite(values)
    else:
        missing = np.asarray(missing, dtype=bool) | ~np.isfinite(values)
    if missing.any():
        values = np.where(missing, 0.0, values)
    return Column(values, missing)


# --- FDI project aggregation -------------------------------------------------


@dataclass(frozen=True)
class FdiProjectRecord:
    country: str
    region: str
    sector_raw: str
    year: int
    jobs: int

    def __post_init__(self):
        if self.jobs < 0:
            raise ValueError(f"jobs_created must be non-negative, got {self.jobs}")


@dataclass
class IngestResult:
    panel: PanelDataset
    quarantined: list[tuple[FdiProjectRecord, str]] = field(default_factory=list)

    @property
    def n_quarantined(self) -> int:
        return len(self.quarantined)


def _sector_code(raw: str, correspondence: Mapping[str, int] | None) -> int | None:
    label = raw.strip()
    if correspondence is not None:
        code = correspondence.get(label)
        if code is None:
            return None
    else:
        try:
            code = int(label)
        except ValueError:
            return None
    return int(code) if 1 <= int(code) <= 99 else None


def ingest_fdi_projects(
    records: Iterable[FdiProjectRecord],
    correspondence: Mapping[str, int] | None = None,
    regional: bool = False,
    years: tuple[int, int] = DEFAULT_YEARS,
) -> IngestResult:
    """Sum created jobs per (country, sector, year), or per region as well.

    Cells without projects are absent from the result. ``n_regions`` counts
    distinct non-empty regions per (country, sector, year) after trimming and
    case-folding; it is missing when no record of the cell names a region.
    Records whose sector label has no correspondence entry, or whose year lies
    outside ``years``, are quarantined rather than aborting the run.
    """
    jobs: dict[tuple, int] = {}
    regions: dict[tuple, set] = {}
    quarantined = []
    for rec in records:
        code = _sector_code(rec.sector_raw, correspondence)
        if code is None:
            quarantined.append((rec, f"unknown sector label {rec.sector_raw!r}"))
            continue
        if not years[0] <= rec.year <= years[1]:
            quarantined.append((rec, f"year {rec.year} outside {years[0]}-{years[1]}"))
            continue
        region = normalize_region(rec.region)
        cell = (rec.country.strip(), code, int(rec.year))
        regions.setdefault(cell, set())
        if region:
            regions[cell].add(region)
        key = cell + (region,) if regional else cell
        jobs[key] = jobs.get(key, 0) + int(rec.jobs)

    ordered = sorted(jobs)
    keys = {
        "country": [k[0] for k in ordered],
        "sector": [k[1] for k in ordered],
        "year": [k[2] for k in ordered],
    }
    if regional:
        keys["region"] = [k[3] for k in ordered]
    n_reg = np.array([len(regions[k[:3]]) for k in ordered], dtype=float)
    cols = {
        "jobs": (np.array([jobs[k] for k in ordered], dtype=float), None),
        "n_regions": (n_reg, n_reg == 0),
    }
    notes = {
        "jobs": "sum of jobs created by FDI projects",
        "n_regions": "distinct destination regions per country-sector-year",
    }
    return IngestResult(PanelDataset(keys, cols, notes), quarantined)


# --- transforms --------------------------------------------------------------


def log_transform(panel: PanelDataset, column: str) -> PanelDataset:
    """Natural log into ``log_<column>``; non-positive values become missing."""
    col = panel.column(column)
    bad = col.missing | (col.values <= 0)
    out = np.zeros(panel.n)
    out[~bad] = np.log(col.values[~bad])
    return panel.with_column(f"log_{column}", out, bad, note=f"natural log of {column}")


def order_statistic(sorted_values: np.ndarray, q: float) -> float:
    """Order statistic at 1-based rank ``ceil(q * n)`` (at least 1)."""
    n = len(sorted_values)
    # Guard against q*n landing a hair above an integer in floating point.
    rank = math.ceil(q * n - 1e-9)
    rank = min(max(rank, 1), n)
    return float(sorted_values[rank - 1])


def winsorize(panel: PanelDataset, column: str, lower_q: float = 0.01, upper_q: float = 0.99) -> PanelDataset:
    if not 0.0 <= lower_q < upper_q <= 1.0:
        raise ValueError(f"need 0 <= lower_q < upper_q <= 1, got {lower_q}, {upper_q}")
    col = panel.column(column)
    observed = np.sort(col.observed)
    if observed.size == 0:
        raise PanelError(f"cannot winsorize empty column {column!r}")
    lo = order_statistic(observed, lower_q)
    hi = order_statistic(observed, upper_q)
    clipped = np.where(col.missing, 0.0, np.clip(col.values, lo, hi))
    note = f"winsorized at order statistics for q=({lower_q}, {upper_q}): [{lo:.6g}, {hi:.6g}]"
    return panel.with_column(column, clipped, col.missing, note=note)


def _group_dims(panel: PanelDataset) -> list[str]:
    return [d for d in ("country", "sector", "region") if d in panel.dims]


def lag(panel: PanelDataset, column: str, k: int = 1) -> PanelDataset:
    """Value from year ``t - k`` of the same (country, sector[, region]) group.

    Gaps are not bridged: if year ``t - k`` is not in the panel the lag is
    missing.
    """
    if k < 1:
        raise ValueError(f"lag order must be >= 1, got {k}")
    if "year" not in panel.dims:
        raise PanelError("lag needs a year dimension")
    col = panel.column(column)
    group = panel.key_codes(_group_dims(panel))
    year = panel.keys["year"]
    span = int(year.max() - year.min()) + k + 1 if panel.n else 1
    base = year.min() - k if panel.n else 0
    code = group * span + (year - base)
    order = np.argsort(code, kind="stable")
    sorted_code = code[order]
    target = code - k
    pos = np.searchsorted(sorted_code, target)
    pos = np.minimum(pos, max(panel.n - 1, 0))
    found = (sorted_code[pos] == target) if panel.n else np.zeros(0, bool)
    src = order[pos]
    values = np.where(found, col.values[src], 0.0)
    missing = ~found | col.missing[src]
    return panel.with_column(f"{column}_lag{k}", values, missing, note=f"{column} lagged {k} year(s)")


def join(base: PanelDataset, other: PanelDataset, level: str = "key") -> PanelDataset:
    """Left join of ``other``'s columns onto ``base`` at ``level``.

    ``level`` is one of ``key`` (country, sector, year), ``country-year`` or
    ``sector-year``. Values broadcast over the base dimensions not in the
    level; unmatched base rows get missing entries. Base keys and row order are
    never changed.
    """
    try:
        dims = JOIN_LEVELS[level]
    except KeyError:
        raise PanelError(f"unknown join level {level!r}; use one of {sorted(JOIN_LEVELS)}") from None
    for d in dims:
        if d not in base.dims or d not in other.dims:
            raise PanelError(f"join level {level!r} needs dimension {d!r} in both panels")
    clash = set(base.columns) & set(other.columns)
    if clash:
        raise PanelError(f"columns already present in base: {sorted(clash)}")

    def tuples(p: PanelDataset):
        return list(zip(*(p.keys[d].tolist() for d in dims)))

    other_keys = tuples(other)
    counts = Counter(other_keys)
    dups = sorted(k for k, c in counts.items() if c > 1)
    if dups:
        raise PanelError(f"duplicate keys in joined panel at level {level!r}: {dups[:10]}")
    lookup = {k: i for i, k in enumerate(other_keys)}
    idx = np.array([lookup.get(k, -1) for k in tuples(base)], dtype=np.int64)
    hit = idx >= 0
    safe = np.where(hit, idx, 0)
    out = base._shallow()
    for name, col in other.columns.items():
        vals = np.where(hit, col.values[safe] if other.n else 0.0, 0.0)
        miss = ~hit | (col.missing[safe] if other.n else True)
        out.columns[name] = Column(vals, miss)
        if name in other.notes:
            out.notes[name] = other.notes[name]
    return out


def filter_complete(panel: PanelDataset, names: Sequence[str]) -> PanelDataset:
    keep = np.ones(panel.n, dtype=bool)
    for name in names:
        keep &= ~panel.column(name).missing
    return panel.take(keep)


# --- descriptive statistics --------------------------------------------------


@dataclass(frozen=True)
class VariableStats:
    count: int
    mean: float
    sd: float
    min: float
    max: float


@dataclass(frozen=True)
class DescriptiveStats:
    variables: dict[str, VariableStats]

    def __getitem__(self, name: str) -> VariableStats:
        return self.variables[name]


@dataclass(frozen=True)
class Correlogram:
    names: tuple[str, ...]
    matrix: np.ndarray

    def __call__(self, a: str, b: str) -> float:
        return float(self.matrix[self.names.index(a), self.names.index(b)])


def describe(panel: PanelDataset, variables: Sequence[str] | None = None) -> DescriptiveStats:
    """Count, mean, sample SD (n - 1), min and max over non-missing values."""
    stats = {}
    for name in variables or list(panel.columns):
        x = panel.column(name).observed
        n = x.size
        if n == 0:
            stats[name] = VariableStats(0, math.nan, math.nan, math.nan, math.nan)
            continue
        sd = float(np.std(x, ddof=1)) if n > 1 else math.nan
        stats[name] = VariableStats(n, float(np.mean(x)), sd, float(x.min()), float(x.max()))
    return DescriptiveStats(stats)


def correlate(panel: PanelDataset, variables: Sequence[str]) -> Correlogram:
    """Pairwise-complete Pearson correlations."""
    k = len(variables)
    cols = [panel.column(v) for v in variables]
    mat = np.eye(k)
    for i in range(k):
        for j in range(i):
            ok = ~cols[i].missing & ~cols[j].missing
            if ok.sum() < 2:
                r = math.nan
            else:
                a = cols[i].values[ok] - cols[i].values[ok].mean()
                b = cols[j].values[ok] - cols[j].values[ok].mean()
                denom = math.sqrt(float(a @ a) * float(b @ b))
                r = float(np.clip(a @ b / denom, -1.0, 1.0)) if denom > 0 else math.nan
            mat[i, j] = mat[j, i] = r
    return Correlogram(tuple(variables), mat)
