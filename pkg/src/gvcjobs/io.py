"""CSV file contracts for projects, correspondences, covariates and panels.

All files are UTF-8, comma separated, with '.' as decimal separator. An empty
cell means missing. Lines starting with ``#`` are comments. Malformed rows
raise :class:`DataFormatError` carrying the file name and line number.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .panel import KEY_DIMS, FdiProjectRecord, PanelDataset

PROJECT_HEADER = ["country", "region", "sector_raw", "year", "jobs"]
CORRESPONDENCE_HEADER = ["sector_raw", "nace2"]
ACCOUNTS_HEADER = [
    "country", "sector", "year", "v_gvc", "va", "y_gvc", "y", "upstreamness", "downstreamness",
]


class DataFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _rows(path):
    """Yield (line_number, cells) for non-comment, non-blank lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for cells in reader:
            line = reader.line_num
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue
            if cells[0].lstrip().startswith("#"):
                continue
            yield line, [c.strip() for c in cells]


def _header(path, rows, expected=None):
    try:
        line, header = next(rows)
    except StopIteration:
        raise DataFormatError(path, 0, "file is empty") from None
    if expected is not None and header != expected:
        raise DataFormatError(path, line, f"expected header {','.join(expected)}, got {','.join(header)}")
    return header


def _int(path, line, text, what):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(path, line, f"{what} must be an integer, got {text!r}") from None


def _real(path, line, text, what):
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(path, line, f"{what} must be a number, got {text!r}") from None
    if not math.isfinite(value):
        raise DataFormatError(path, line, f"{what} must be finite, got {text!r}")
    return value


def read_fdi_projects(path) -> list[FdiProjectRecord]:
    rows = _rows(path)
    _header(path, rows, PROJECT_HEADER)
    records = []
    for line, cells in rows:
        if len(cells) != 5:
            raise DataFormatError(path, line, f"expected 5 fields, got {len(cells)}")
        country, region, sector_raw, year, jobs = cells
        if not country:
            raise DataFormatError(path, line, "country is empty")
        jobs_n = _int(path, line, jobs, "jobs")
        if jobs_n < 0:
            raise DataFormatError(path, line, f"jobs must be non-negative, got {jobs_n}")
        records.append(FdiProjectRecord(country, region, sector_raw, _int(path, line, year, "year"), jobs_n))
    return records


def write_fdi_projects(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROJECT_HEADER)
        for r in records:
            w.writerow([r.country, r.region, r.sector_raw, r.year, r.jobs])


def read_correspondence(path) -> dict[str, int]:
    rows = _rows(path)
    _header(path, rows, CORRESPONDENCE_HEADER)
    mapping = {}
    for line, cells in rows:
        if len(cells) != 2:
            raise DataFormatError(path, line, f"expected 2 fields, got {len(cells)}")
        raw, code = cells
        code_n = _int(path, line, code, "nace2")
        if not 1 <= code_n <= 99:
            raise DataFormatError(path, line, f"nace2 code must be in 1-99, got {code_n}")
        if raw in mapping and mapping[raw] != code_n:
            raise DataFormatError(path, line, f"conflicting codes for sector label {raw!r}")
        mapping[raw] = code_n
    return mapping


def write_correspondence(mapping, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORRESPONDENCE_HEADER)
        for raw, code in sorted(mapping.items()):
            w.writerow([raw, code])


def read_panel(path, expected_header=None) -> PanelDataset:
    """Read a keyed CSV: leading key columns, then numeric variables.

    Key columns are whichever of ``country, region, sector, year`` open the
    header, in that order.
    """
    rows = _rows(path)
    header = _header(path, rows, expected_header)
    dims = []
    for name in header:
        if name in KEY_DIMS:
            dims.append(name)
        else:
            break
    if not dims:
        raise DataFormatError(path, 1, "header names no key columns (country, region, sector, year)")
    if dims != [d for d in KEY_DIMS if d in dims]:
        raise DataFormatError(path, 1, f"key columns must appear in order {KEY_DIMS}")
    variables = header[len(dims):]
    if len(set(header)) != len(header):
        raise DataFormatError(path, 1, "duplicate column names in header")
    keys = {d: [] for d in dims}
    data = [[] for _ in variables]
    for line, cells in rows:
        if len(cells) != len(header):
            raise DataFormatError(path, line, f"expected {len(header)} fields, got {len(cells)}")
        for d, text in zip(dims, cells):
            if d in ("sector", "year"):
                keys[d].append(_int(path, line, text, d))
            else:
                keys[d].append(text)
        for store, name, text in zip(data, variables, cells[len(dims):]):
            store.append(_real(path, line, text, name))
    columns = {}
    for name, store in zip(variables, data):
        missing = np.array([v is None for v in store], dtype=bool)
        values = np.array([0.0 if v is None else v for v in store], dtype=float)
        columns[name] = (values, missing)
    try:
        return PanelDataset(keys, columns)
    except ValueError as exc:
        raise DataFormatError(path, 0, str(exc)) from None


def read_accounts(path) -> PanelDataset:
    return read_panel(path, ACCOUNTS_HEADER)


def format_real(value: float) -> str:
    """Shortest text that round-trips exactly."""
    return repr(float(value))


def write_panel(panel: PanelDataset, path, columns=None) -> None:
    names = list(columns or panel.columns)
    order = panel.sort_order()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(panel.dims) + names)
        cols = [panel.column(n) for n in names]
        keys = [panel.keys[d] for d in panel.dims]
        for i in order:
            row = [str(k[i]) for k in keys]
            row += ["" if c.missing[i] else format_real(c.values[i]) for c in cols]
            w.writerow(row)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
