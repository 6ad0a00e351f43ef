"""Feature matrices from explicit LLM scores or from pooled hidden states."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import PlaceId
from .errors import (
    DimensionMismatch,
    EmptyMatrix,
    HiddenStateFormatError,
    MixedHiddenDim,
)
from .parsing import FeatureSchema, ParsedFeatures

HST_MAGIC = b"HST1"
_HEADER = struct.Struct("<4sII")


@dataclass
class FeatureMatrix:
    places: list[PlaceId]
    feature_names: list[str]
    values: np.ndarray
    provenance: str = "explicit"
    omitted: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.places), len(self.feature_names))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix has non-finite entries")
        if self.provenance not in ("explicit", "implicit"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "feature_names": list(self.feature_names),
            "places": [{"name": p.name, "qualifier": p.qualifier} for p in self.places],
            "values": self.values.tolist(),
            "omitted": self.omitted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMatrix":
        places = [PlaceId(p["name"], p.get("qualifier", "")) if isinstance(p, dict) else PlaceId.parse(p)
                  for p in d["places"]]
        names = list(d["feature_names"])
        values = np.array(d["values"], dtype=float) if places else np.zeros((0, len(names)))
        return cls(places, names, values, d.get("provenance", "explicit"), d.get("omitted", 0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMatrix":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def assemble_explicit(answers: Mapping[PlaceId, ParsedFeatures], schema: FeatureSchema,
                      place_order: Sequence[PlaceId] | None = None) -> FeatureMatrix:
    """Stack parsed scores into a matrix with columns in schema order.

    Rows follow ``place_order`` (the task's place list); places without an
    answer are left out and counted in ``omitted``.
    """
    order = list(place_order) if place_order is not None else list(answers)
    names = schema.names
    rows, places = [], []
    for place in order:
        ans = answers.get(place)
        if ans is None:
            continue
        rows.append([ans.values[n] for n in names])
        places.append(place)
    if not rows:
        raise EmptyMatrix("no usable feature answers")
    return FeatureMatrix(places, names, np.array(rows, dtype=float), "explicit", omitted=len(order) - len(rows))


@dataclass
class HiddenStateTensor:
    place: PlaceId
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise HiddenStateFormatError(f"hidden state must be a non-empty 2-D array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise HiddenStateFormatError(f"non-finite hidden state for {self.place}")

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.data.shape[1]


def write_hst(path: str | Path, data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise HiddenStateFormatError("HST1 holds a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(HST_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_hst(path: str | Path, place: PlaceId | None = None) -> HiddenStateTensor:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise HiddenStateFormatError(f"{path}: truncated header")
    magic, n_tokens, hidden_dim = _HEADER.unpack_from(blob)
    if magic != HST_MAGIC:
        raise HiddenStateFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * n_tokens * hidden_dim
    if len(blob) != expected:
        raise HiddenStateFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_tokens, hidden_dim)
    return HiddenStateTensor(place or PlaceId(Path(path).stem), data)


def load_hidden_manifest(path: str | Path) -> list[HiddenStateTensor]:
    """Read a manifest mapping rendered place names to HST1 files (paths relative to it)."""
    path = Path(path)
    mapping = json.loads(path.read_text(encoding="utf-8"))
    tensors = []
    for name, file in mapping.items():
        f = Path(file)
        if not f.is_absolute():
            f = path.parent / f
        tensors.append(read_hst(f, PlaceId.parse(name)))
    return tensors


def mean_max_pool(t: HiddenStateTensor | np.ndarray) -> np.ndarray:
    """Concatenate per-dimension token means and token maxima."""
    data = np.asarray(t.data if isinstance(t, HiddenStateTensor) else t, dtype=float)
    return np.concatenate([data.mean(axis=0), data.max(axis=0)])


@dataclass
class Projection:
    in_dim: int
    out_dim: int = 32
    seed: int = 0
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("projection dims must be positive")
        rng = np.random.default_rng(self.seed)
        self.matrix = rng.standard_normal((self.in_dim, self.out_dim)) / np.sqrt(self.in_dim)


def project(pooled: np.ndarray, p: Projection) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=float)
    if pooled.ndim != 1 or pooled.shape[0] != p.in_dim:
        raise DimensionMismatch(f"expected a vector of length {p.in_dim}, got shape {pooled.shape}")
    return pooled @ p.matrix


def assemble_implicit(tensors: Sequence[HiddenStateTensor], out_dim: int = 32, seed: int = 0) -> FeatureMatrix:
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    if not tensors:
        raise EmptyMatrix("no hidden-state tensors")
    dims = {t.hidden_dim for t in tensors}
    if len(dims) > 1:
        raise MixedHiddenDim(f"tensors disagree on hidden_dim: {sorted(dims)}")
    proj = Projection(2 * dims.pop(), out_dim, seed)
    rows = np.stack([project(mean_max_pool(t), proj) for t in tensors])
    return FeatureMatrix([t.place for t in tensors], [f"h{i}" for i in range(out_dim)], rows, "implicit")
