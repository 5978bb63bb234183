"""Sample partitions for heterogeneity splits (membership, factor and tech intensity)."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .io import DataFormatError, _rows
from .panel import PanelDataset

BUILTIN_PARTITIONS = ("eu_membership", "factor_intensity", "tech_intensity")


@dataclass(frozen=True)
class PartitionMap:
    dimension: str
    mapping: dict
    note: str = ""

    def __post_init__(self):
        if self.dimension not in ("country", "sector"):
            raise ValueError(f"partition dimension must be country or sector, got {self.dimension!r}")
        empty = [k for k, v in self.mapping.items() if not str(v).strip()]
        if empty:
            raise ValueError(f"empty class labels for keys {empty[:5]}")

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.mapping.values()))


@dataclass
class SplitResult:
    parts: dict[str, PanelDataset]
    quarantined: PanelDataset
    empty: list[str] = field(default_factory=list)


def read_partition(path) -> PartitionMap:
    """Read ``<dimension>,class`` CSV; ``#`` lines become the provenance note."""
    notes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.lstrip().startswith("#"):
                notes.append(line.lstrip()[1:].strip())
    rows = _rows(path)
    try:
        line, header = next(rows)
    except StopIteration:
        raise DataFormatError(path, 0, "file is empty") from None
    if len(header) != 2 or header[1] != "class" or header[0] not in ("country", "sector"):
        raise DataFormatError(path, line, "header must be 'country,class' or 'sector,class'")
    dim = header[0]
    mapping = {}
    for line, cells in rows:
        if len(cells) != 2 or not cells[1]:
            raise DataFormatError(path, line, "expected '<key>,<class>' with a non-empty class")
        key = cells[0]
        if dim == "sector":
            try:
                key = int(key)
            except ValueError:
                raise DataFormatError(path, line, f"sector key must be an integer, got {key!r}") from None
        if key in mapping:
            raise DataFormatError(path, line, f"key {key!r} listed twice")
        mapping[key] = cells[1]
    return PartitionMap(dim, mapping, " ".join(notes))


def builtin_partition(name: str) -> PartitionMap:
    if name not in BUILTIN_PARTITIONS:
        raise KeyError(f"no built-in partition {name!r}; have {BUILTIN_PARTITIONS}")
    ref = resources.files("gvcjobs") / "data" / f"{name}.csv"
    with resources.as_file(ref) as path:
        return read_partition(path)


def split_sample(panel: PanelDataset, partition: PartitionMap) -> SplitResult:
    """Disjoint sub-panels per class; rows with unmapped keys are quarantined."""
    if partition.dimension not in panel.dims:
        raise ValueError(f"panel has no {partition.dimension!r} dimension to split on")
    keys = panel.keys[partition.dimension]
    labels = np.array([partition.mapping.get(k if partition.dimension == "country" else int(k), "")
                       for k in keys], dtype=object)
    parts = {}
    empty = []
    for cls in partition.classes:
        rows = labels == cls
        if not rows.any():
            empty.append(cls)
        parts[cls] = panel.take(rows)
    return SplitResult(parts, panel.take(labels == ""), empty)


def apply_sample(panel: PanelDataset, sample: str | None, partitions=None) -> PanelDataset:
    """Restrict ``panel`` to ``partition:class``; None returns it unchanged."""
    if sample is None:
        return panel
    name, cls = (s.strip() for s in sample.split(":", 1))
    partitions = partitions or {}
    part = partitions[name] if name in partitions else builtin_partition(name)
    result = split_sample(panel, part)
    if cls not in result.parts:
        raise ValueError(f"partition {name!r} has no class {cls!r}; classes: {part.classes}")
    if cls in result.empty:
        raise ValueError(f"class {cls!r} of partition {name!r} is empty in this panel")
    return result.parts[cls]
