import csv
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cityprobe.dataset import (
    PlaceId,
    TaskSpec,
    TargetTable,
    assign_folds,
    load_task,
    normalize_region_targets,
    write_targets,
)
from cityprobe.errors import DuplicatePlace, EmptyDataset, MissingColumn, TooFewPlaces
from oracles import write_mining_fixture


def make_task(names, level="city"):
    return TaskSpec("t", "Target", tuple(PlaceId.parse(n) for n in names), level=level)


def region_table(values):
    places = [PlaceId(f"R{i}") for i in range(len(values))]
    return TargetTable(dict(zip(places, map(float, values))), level="region")


def test_place_rendering_round_trip():
    p = PlaceId.parse("Los Angeles, California")
    assert (p.name, p.qualifier) == ("Los Angeles", "California")
    assert p.rendered == "Los Angeles, California"
    assert PlaceId.parse("Tokyo").rendered == "Tokyo"
    assert PlaceId.parse("New York, New York, USA").rendered == "New York, New York, USA"


def test_single_row(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text('place,target\n"Tianjin, China",50\n')
    table = load_task(f, make_task(["Tianjin, China"]))
    assert len(table) == 1
    assert table.entries[PlaceId("Tianjin", "China")] == 50.0
    assert table.drop_count == 0


def test_blank_target_dropped(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("place,target,extra\nA,1,x\nB,,y\nC,3,z\n")
    table = load_task(f, make_task(["A", "B", "C"]))
    assert len(table) == 2
    assert table.drop_count == 1
    assert table.dropped["missing_target"] == 1


def test_non_finite_target_dropped(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("place,target\nA,nan\nB,inf\nC,2\n")
    assert load_task(f, make_task(["A", "B", "C"])).drop_count == 2


def test_errors(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("place,value\nA,1\n")
    with pytest.raises(MissingColumn):
        load_task(f, make_task(["A"]))
    f.write_text("place,target\nA,1\nA,2\n")
    with pytest.raises(DuplicatePlace):
        load_task(f, make_task(["A"]))
    f.write_text("place,target\nA,\n")
    with pytest.raises(EmptyDataset):
        load_task(f, make_task(["A"]))


def test_mining_fixture_counts(tmp_path):
    f = tmp_path / "mining.csv"
    written = write_mining_fixture(f)
    with open(f, newline="") as fh:
        names = [r["place"] for r in csv.DictReader(fh)]
    table = load_task(f, make_task(names))
    assert len(table) == 245
    counts = Counter(table.entries.values())
    assert counts[5.0] == 54 and counts[50.0] == 176
    assert len([v for v in counts if v not in (5.0, 50.0)]) == 15
    assert Counter(written) == counts


@pytest.mark.parametrize("values, expected", [
    ([0, 5, 10], [0, 5, 10]),
    ([2, 4], [0, 10]),
    ([7, 7, 7], [0, 0, 0]),
])
def test_normalize_examples(values, expected):
    table = region_table(values)
    out = normalize_region_targets(table)
    assert list(out.entries.values()) == pytest.approx(expected, abs=1e-12)
    assert list(table.entries.values()) == [float(v) for v in values]  # original untouched
    assert out.normalized


def test_normalize_rejects_city_level():
    with pytest.raises(ValueError):
        normalize_region_targets(TargetTable({PlaceId("A"): 1.0}, level="city"))


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@settings(max_examples=200)
@given(st.lists(finite, min_size=1, max_size=40))
def test_normalize_properties(values):
    once = normalize_region_targets(region_table(values))
    twice = normalize_region_targets(once)
    a = list(once.entries.values())
    b = list(twice.entries.values())
    assert all(abs(x - y) <= 1e-12 for x, y in zip(a, b))
    assert all(0.0 <= v <= 10.0 for v in a)
    if max(values) > min(values):
        assert a[values.index(min(values))] == 0.0
        assert a[values.index(max(values))] == 10.0


def test_folds_examples():
    places = [PlaceId(f"P{i}") for i in range(10)]
    fa = assign_folds(places, 5, seed=1)
    assert fa.sizes() == [2] * 5
    assert sorted(p for f in range(5) for p in fa.members(f)) == sorted(places)
    eleven = [PlaceId(f"P{i}") for i in range(11)]
    assert sorted(assign_folds(eleven, 5, 3).sizes(), reverse=True) == [3, 2, 2, 2, 2]
    assert assign_folds(eleven, 5, 3) == assign_folds(eleven, 5, 3)
    with pytest.raises(TooFewPlaces):
        assign_folds(places[:3], 5, 0)


@settings(max_examples=100)
@given(st.integers(2, 80), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_fold_partition(n, k, seed):
    if n < k:
        return
    places = [PlaceId(f"P{i}") for i in range(n)]
    fa = assign_folds(places, k, seed)
    sizes = fa.sizes()
    assert sum(sizes) == n
    assert max(sizes) - min(sizes) <= 1
    assert set(fa.assignment) == set(places)
    assert all(0 <= f < k for f in fa.assignment.values())


@settings(max_examples=100)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=30))
def test_loader_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    places = tuple(PlaceId(f"Town {i}", "Land, Sub") for i in range(len(values)))
    task = TaskSpec("t", "x", places)
    table = TargetTable(dict(zip(places, values)), provenance=str(path))
    write_targets(table, path)
    back = load_task(path, task)
    assert list(back.entries.items()) == list(table.entries.items())
    assert all(math.isfinite(v) for v in back.entries.values())
