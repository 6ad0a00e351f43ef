"""Ground-truth task datasets: loading, region normalization and fold assignment."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DuplicatePlace, EmptyDataset, MissingColumn, TooFewPlaces

LEVELS = ("city", "region")


@dataclass(frozen=True, order=True)
class PlaceId:
    name: str
    qualifier: str = ""

    @property
    def rendered(self) -> str:
        return f"{self.name}, {self.qualifier}" if self.qualifier else self.name

    def __str__(self) -> str:
        return self.rendered

    @classmethod
    def parse(cls, text: str) -> "PlaceId":
        """Split ``"Los Angeles, California"`` at the first comma."""
        name, sep, qualifier = text.strip().partition(",")
        return cls(name.strip(), qualifier.strip() if sep else "")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    target_name: str
    places: tuple[PlaceId, ...]
    unit: str = ""
    level: str = "city"
    scale_hint: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.places:
            raise EmptyDataset(f"task {self.task_id!r} has no places")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        seen = set()
        for p in self.places:
            if p.rendered in seen:
                raise DuplicatePlace(p.rendered)
            seen.add(p.rendered)

    def place_index(self) -> dict[str, PlaceId]:
        return {p.rendered: p for p in self.places}

    def to_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "target_name": self.target_name,
            "unit": self.unit,
            "level": self.level,
            "places": [{"name": p.name, "qualifier": p.qualifier} for p in self.places],
        }
        if self.scale_hint is not None:
            d["scale_hint"] = list(self.scale_hint)
        return d

    @classmethod
    def from_dict(cls, d: Mapping, places: Iterable[PlaceId] | None = None) -> "TaskSpec":
        raw_places = d.get("places")
        if raw_places:
            parsed = []
            for item in raw_places:
                if isinstance(item, str):
                    parsed.append(PlaceId.parse(item))
                else:
                    parsed.append(PlaceId(item["name"], item.get("qualifier", "")))
            places = parsed
        scale = d.get("scale_hint")
        return cls(
            task_id=d["task_id"],
            target_name=d["target_name"],
            unit=d.get("unit", ""),
            level=d.get("level", "city"),
            places=tuple(places or ()),
            scale_hint=tuple(float(v) for v in scale) if scale else None,
        )


def load_task_meta(path: str | Path, csv_path: str | Path | None = None) -> TaskSpec:
    """Read task metadata JSON; places may be omitted and taken from ``csv_path``."""
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    places = None
    if not meta.get("places"):
        if csv_path is None:
            raise EmptyDataset(f"{path} lists no places and no CSV was given")
        places = read_place_column(csv_path)
    return TaskSpec.from_dict(meta, places)


def read_place_column(csv_path: str | Path) -> list[PlaceId]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "place" not in reader.fieldnames:
            raise MissingColumn("place")
        seen: dict[str, PlaceId] = {}
        for row in reader:
            name = (row["place"] or "").strip()
            if name and name not in seen:
                seen[name] = PlaceId.parse(name)
    return list(seen.values())


@dataclass(frozen=True)
class TargetTable:
    entries: dict[PlaceId, float]
    provenance: str = ""
    level: str = "city"
    dropped: dict[str, int] = field(default_factory=dict)
    normalized: bool = False

    @property
    def drop_count(self) -> int:
        return sum(self.dropped.values())

    @property
    def places(self) -> list[PlaceId]:
        return list(self.entries)

    def values(self, places: Iterable[PlaceId] | None = None) -> np.ndarray:
        keys = self.entries if places is None else places
        return np.array([self.entries[p] for p in keys], dtype=float)

    def __len__(self):
        return len(self.entries)


def load_task(csv_path: str | Path, task_meta: TaskSpec) -> TargetTable:
    """Load a ``place,target`` CSV for ``task_meta``.

    Rows whose target is blank or non-finite are dropped, as are rows naming a
    place the task does not list; both are tallied in ``TargetTable.dropped``.
    """
    index = task_meta.place_index()
    entries: dict[PlaceId, float] = {}
    dropped = {"missing_target": 0, "unknown_place": 0}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("place", "target"):
            if col not in fields:
                raise MissingColumn(f"{csv_path}: missing column {col!r}")
        for row in reader:
            key = (row["place"] or "").strip()
            place = index.get(key)
            if place is None:
                dropped["unknown_place"] += 1
                continue
            if place in entries:
                raise DuplicatePlace(f"{csv_path}: {key!r} appears twice")
            try:
                value = float((row["target"] or "").strip())
            except ValueError:
                value = math.nan
            if not math.isfinite(value):
                dropped["missing_target"] += 1
                continue
            entries[place] = value
    if not entries:
        raise EmptyDataset(f"{csv_path}: no usable rows")
    # keep the task's place order
    ordered = {p: entries[p] for p in task_meta.places if p in entries}
    return TargetTable(ordered, provenance=str(csv_path), level=task_meta.level, dropped=dropped)


def write_targets(table: TargetTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["place", "target"])
        for place, value in table.entries.items():
            writer.writerow([place.rendered, repr(float(value))])


def normalize_region_targets(table: TargetTable) -> TargetTable:
    """Min-max scale targets onto [0, 10]; a constant table maps to all zeros."""
    if not table.entries:
        raise EmptyDataset("cannot normalize an empty table")
    if table.level != "region":
        raise ValueError("only region-level tables are normalized")
    vals = table.values()
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        scaled = np.zeros_like(vals)
    else:
        scaled = np.clip(10.0 * (vals - lo) / (hi - lo), 0.0, 10.0)
        # pin the endpoints exactly
        scaled[vals == lo] = 0.0
        scaled[vals == hi] = 10.0
    entries = dict(zip(table.entries, (float(v) for v in scaled)))
    return replace(table, entries=entries, normalized=True)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    assignment: dict[PlaceId, int]

    def fold_of(self, place: PlaceId) -> int:
        return self.assignment[place]

    def members(self, fold: int) -> list[PlaceId]:
        return [p for p, f in self.assignment.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts


def assign_folds(places: list[PlaceId], k: int, seed: int) -> FoldAssignment:
    """Shuffle ``places`` with ``seed`` and deal them round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(places) < k:
        raise TooFewPlaces(f"{len(places)} places cannot fill {k} folds")
    if len(set(places)) != len(places):
        raise DuplicatePlace("duplicate places in fold assignment")
    order = np.random.default_rng(seed).permutation(len(places))
    assignment = {places[int(j)]: i % k for i, j in enumerate(order)}
    # report in input order
    return FoldAssignment(k, seed, {p: assignment[p] for p in places})
