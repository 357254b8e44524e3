"""Category taxonomy, frequency splits and frequency-derived weights."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CatalogCountTooSmall,
    CatalogSizeError,
    DataError,
    FormatError,
    IoError,
    SplitSizeError,
)

UNLABELED = 0xFFFF
SPLITS = ("head", "common", "tail")
# Structural categories never count as placeable objects.
STRUCTURAL_NAMES = frozenset({"floor", "wall", "ceiling"})


def canonicalize(name: str) -> str:
    return re.sub(r"[\s_]+", " ", name.strip().lower())


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    instance_count: int = 0
    point_count: int = 0

    def __post_init__(self):
        if self.instance_count < 0 or self.point_count < 0:
            raise DataError(f"negative count in record {self.name!r}")


@dataclass(frozen=True)
class LabelCatalog:
    records: tuple
    split: Mapping[int, str] = field(default_factory=dict)
    raw_to_canonical: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if ids != list(range(len(ids))):
            raise DataError("category ids must be contiguous 0..N-1 in order")
        canon = [canonicalize(r.name) for r in self.records]
        if len(set(canon)) != len(canon):
            raise DataError("category names are not unique after canonicalization")
        if self.split:
            if set(self.split) != set(ids) or not set(self.split.values()) <= set(SPLITS):
                raise DataError("split must assign every id to head/common/tail")
        if not self.raw_to_canonical:
            object.__setattr__(self, "raw_to_canonical", {c: i for i, c in enumerate(canon)})

    def __len__(self):
        return len(self.records)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.records]

    @property
    def point_counts(self) -> np.ndarray:
        return np.array([r.point_count for r in self.records], dtype=np.int64)

    @property
    def instance_counts(self) -> np.ndarray:
        return np.array([r.instance_count for r in self.records], dtype=np.int64)

    def ids_in(self, split: str) -> list[int]:
        return [i for i in range(len(self)) if self.split.get(i) == split]

    def id_of(self, name: str) -> int:
        cid = map_raw_label(self, name)
        if cid == UNLABELED:
            raise KeyError(name)
        return cid

    def structural_ids(self) -> set[int]:
        return {r.id for r in self.records if canonicalize(r.name) in STRUCTURAL_NAMES}


def make_catalog(names: Sequence[str], instance_counts=None, point_counts=None,
                 sizes=None) -> LabelCatalog:
    n = len(names)
    ic = [0] * n if instance_counts is None else [int(c) for c in instance_counts]
    pc = [0] * n if point_counts is None else [int(c) for c in point_counts]
    records = tuple(CategoryRecord(i, names[i], ic[i], pc[i]) for i in range(n))
    catalog = LabelCatalog(records)
    if sizes is not None:
        catalog = assign_splits(catalog, sizes)
    return catalog


def select_top_k(records: Sequence[CategoryRecord], k: int) -> list[CategoryRecord]:
    """Keep the ``k`` most-instanced records, re-indexed densely.

    Order is instance count descending with name ascending on ties.
    """
    if not records:
        raise CatalogSizeError("no records to select from")
    if k <= 0 or k > len(records):
        raise CatalogSizeError(f"cannot select {k} of {len(records)} records")
    ranked = sorted(records, key=lambda r: (-r.instance_count, r.name))[:k]
    return [replace(r, id=i) for i, r in enumerate(ranked)]


def frequency_order(catalog: LabelCatalog) -> list[int]:
    """Ids by point count descending, name ascending on ties."""
    return sorted(range(len(catalog)),
                  key=lambda i: (-catalog.records[i].point_count, catalog.records[i].name))


def default_split_sizes(n: int) -> tuple[int, int, int]:
    """Head/common/tail sizes in the 66/68/66 proportion."""
    head = int(round(n * 66 / 200))
    tail = head
    return head, n - head - tail, tail


def assign_splits(catalog: LabelCatalog, sizes) -> LabelCatalog:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or any(s <= 0 for s in sizes) or sum(sizes) != len(catalog):
        raise SplitSizeError(f"split sizes {sizes} do not partition {len(catalog)} categories")
    order = frequency_order(catalog)
    split = {}
    for rank, cid in enumerate(order):
        if rank < sizes[0]:
            split[cid] = "head"
        elif rank < sizes[0] + sizes[1]:
            split[cid] = "common"
        else:
            split[cid] = "tail"
    return replace(catalog, split=dict(sorted(split.items())))


def with_counts(catalog: LabelCatalog, instance_counts, point_counts) -> LabelCatalog:
    records = tuple(replace(r, instance_count=int(ic), point_count=int(pc))
                    for r, ic, pc in zip(catalog.records, instance_counts, point_counts))
    return replace(catalog, records=records, split={})


def _checked_counts(catalog: LabelCatalog, ids=None) -> np.ndarray:
    ids = range(len(catalog)) if ids is None else ids
    counts = np.array([catalog.records[i].point_count for i in ids], dtype=np.float64)
    if counts.size == 0:
        raise CatalogCountTooSmall("empty id subset")
    if np.any(counts < 2):
        raise CatalogCountTooSmall("every point count must be at least 2 for log weighting")
    return counts


def alpha_weights(catalog: LabelCatalog, log=np.log) -> np.ndarray:
    """Class-balancing weights ``log(n_i) / sum_j log(n_j)`` over point counts.

    ``log`` may be any logarithm; the ratio does not depend on its base.
    """
    logs = log(_checked_counts(catalog))
    return logs / logs.sum()


def inverse_log_weights(catalog: LabelCatalog, ids: Iterable[int]) -> np.ndarray:
    ids = list(ids)
    inv = 1.0 / np.log(_checked_counts(catalog, ids))
    return inv / inv.sum()


def map_raw_label(catalog: LabelCatalog, raw: str) -> int:
    return catalog.raw_to_canonical.get(canonicalize(raw), UNLABELED)


def with_aliases(catalog: LabelCatalog, aliases: Mapping[str, str]) -> LabelCatalog:
    """Extend the raw-label map with ``raw -> canonical name`` merge aliases.

    Aliases pointing at names outside the catalog map to nothing (the raw
    label stays UNLABELED).
    """
    table = dict(catalog.raw_to_canonical)
    canon = {canonicalize(r.name): r.id for r in catalog.records}
    for raw, target in aliases.items():
        cid = canon.get(canonicalize(target))
        if cid is not None:
            table[canonicalize(raw)] = cid
    return replace(catalog, raw_to_canonical=table)


# -- files --------------------------------------------------------------------

def format_catalog(catalog: LabelCatalog) -> str:
    lines = []
    for r in catalog.records:
        lines.append(f"{r.id}\t{r.name}\t{r.instance_count}\t{r.point_count}\t"
                     f"{catalog.split.get(r.id, '')}")
    return "".join(line + "\n" for line in lines)


def write_catalog(catalog: LabelCatalog, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_catalog(catalog))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def parse_catalog(text: str) -> LabelCatalog:
    records, split = [], {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"catalog line {lineno}: expected 5 tab-separated fields")
        try:
            cid, ic, pc = int(parts[0]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise FormatError(f"catalog line {lineno}: {exc}") from exc
        records.append(CategoryRecord(cid, parts[1], ic, pc))
        if parts[4]:
            split[cid] = parts[4]
    return LabelCatalog(tuple(records), split)


def read_catalog(path, mapping_path=None) -> LabelCatalog:
    try:
        with open(path, encoding="utf-8") as fh:
            catalog = parse_catalog(fh.read())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if mapping_path is not None:
        catalog = with_aliases(catalog, read_label_mapping(mapping_path))
    return catalog


def read_label_mapping(path) -> dict[str, str]:
    """Tab-separated ``raw_name -> canonical_name`` lines."""
    if not os.path.exists(path):
        raise IoError(f"no such mapping file: {path}")
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"mapping line {lineno}: expected raw<TAB>canonical")
            mapping[parts[0]] = parts[1]
    return mapping

