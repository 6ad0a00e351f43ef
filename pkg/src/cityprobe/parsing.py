"""Pull structured numeric answers out of raw chat-model text."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

from .errors import (
    DuplicateName,
    MissingKey,
    NoJsonFound,
    ParseError,
    Unparseable,
    WrongCount,
)

_FENCE = re.compile(r"^[ \t]*```[A-Za-z0-9_-]*[ \t]*$", re.MULTILINE)
_TRAILING_COMMA = re.compile(r",\s*([\]}])")
# 1,234.5 | 1234 | .5 | 3e4, then an optional % or unit words
_NUMBER = re.compile(
    r"""^\s*(?P<num>[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)?(?:\.\d+)?(?:[eE][-+]?\d+)?)
        \s*(?P<suffix>%|[^\W\d_][^\d]*)?\s*$""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Feature:
    name: str
    description: str = ""


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    scale: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        if not self.features:
            raise ValueError("schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DuplicateName(f"duplicate feature names in {names}")
        low, high = self.scale
        if not low < high:
            raise ValueError(f"scale low must be below high, got {self.scale}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        return {
            "features": [{"name": f.name, "description": f.description} for f in self.features],
            "scale": list(self.scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = tuple(Feature(f["name"], f.get("description", "")) for f in d["features"])
        scale = tuple(float(v) for v in d.get("scale", (0.0, 10.0)))
        return cls(feats, scale)


@dataclass(frozen=True)
class ParsedDirect:
    zone: str
    pred: float

    def to_json(self) -> str:
        return json.dumps({"zone": self.zone, "pred": self.pred})


@dataclass(frozen=True)
class ParsedFeatures:
    values: dict[str, float]
    clamped: frozenset[str] = field(default_factory=frozenset)

    def to_json(self) -> str:
        return json.dumps(self.values)


def _strip_fences(text: str) -> str:
    return _FENCE.sub("", text)


def _balanced_objects(text: str):
    """Yield every balanced ``{...}`` span, scanning left to right."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        end = -1
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    end = i
                    break
        if end != -1:
            yield text[start : end + 1]
        start = text.find("{", start + 1)


def _loads_object(candidate: str):
    for text in (candidate, _TRAILING_COMMA.sub(r"\1", candidate)):
        try:
            obj = json.loads(text)
        except (ValueError, RecursionError):
            continue
        if isinstance(obj, dict):
            return obj
    return None


def extract_json_object(raw) -> str:
    """Return the first balanced JSON object in ``raw``.

    Markdown code fences are stripped first. Balanced spans that do not decode
    as a JSON object (even after dropping trailing commas) are skipped.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    text = _strip_fences(raw)
    for candidate in _balanced_objects(text):
        if _loads_object(candidate) is not None:
            return candidate
    raise NoJsonFound(f"no JSON object in response: {raw[:80]!r}")


def load_json_object(raw) -> dict:
    return _loads_object(extract_json_object(raw))


def coerce_number(value, key: str = "value") -> float:
    """Read a finite float from a JSON scalar.

    Strings may carry thousands separators, a ``%`` sign or trailing unit
    words (``"24,654.91 t"``); ranges such as ``"5-10"`` are rejected.
    """
    if isinstance(value, bool) or value is None:
        raise Unparseable(key, value)
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        m = _NUMBER.match(value)
        num = m.group("num") if m else ""
        if not num or not re.search(r"\d", num):
            raise Unparseable(key, value)
        try:
            out = float(num.replace(",", ""))
        except ValueError:
            raise Unparseable(key, value) from None
    else:
        raise Unparseable(key, value)
    if not math.isfinite(out):
        raise Unparseable(key, value)
    return out


def parse_direct(raw: str) -> ParsedDirect:
    obj = load_json_object(raw)
    if "pred" not in obj:
        raise MissingKey("pred")
    zone = obj.get("zone", "")
    return ParsedDirect(zone=str(zone) if zone is not None else "", pred=coerce_number(obj["pred"], "pred"))


def parse_features(raw: str, schema: FeatureSchema) -> ParsedFeatures:
    """Read one score per schema feature, clamping out-of-scale values to the bounds."""
    obj = load_json_object(raw)
    low, high = schema.scale
    values: dict[str, float] = {}
    clamped = set()
    for name in schema.names:
        if name not in obj:
            raise MissingKey(name)
        v = coerce_number(obj[name], name)
        if v < low or v > high:
            clamped.add(name)
            v = min(max(v, low), high)
        values[name] = v
    return ParsedFeatures(values, frozenset(clamped))


def snake_case(name: str) -> str:
    s = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", name.strip())
    s = re.sub(r"[^0-9a-zA-Z]+", "_", s).strip("_").lower()
    return s


def parse_schema(raw: str, expected_count: int, scale=(0.0, 10.0)) -> FeatureSchema:
    if expected_count < 1:
        raise ValueError("expected_count must be at least 1")
    obj = load_json_object(raw)
    items = obj.get("features")
    if items is None:
        raise MissingKey("features")
    if not isinstance(items, list):
        raise ParseError(f"'features' should be a list, got {type(items).__name__}")
    if len(items) != expected_count:
        raise WrongCount(f"expected {expected_count} features, got {len(items)}")
    feats = []
    seen = set()
    for item in items:
        if isinstance(item, str):
            name, desc = item, ""
        elif isinstance(item, dict) and "name" in item:
            name, desc = str(item["name"]), str(item.get("description", "") or "")
        else:
            raise MissingKey("name")
        key = snake_case(name)
        if not key:
            raise ParseError(f"feature name {name!r} has no usable characters")
        if key in seen:
            raise DuplicateName(key)
        seen.add(key)
        feats.append(Feature(key, " ".join(desc.split())))
    return FeatureSchema(tuple(feats), tuple(float(v) for v in scale))


_KEY_LINE = re.compile(r'^"([^"]+)"', re.MULTILINE)
_DIRECT_KEY = re.compile(r"^- (\w+):", re.MULTILINE)


def requested_keys(prompt_text: str) -> list[str]:
    """Answer keys a rendered prompt asks for, read back from its text."""
    keys = _KEY_LINE.findall(prompt_text)
    if keys:
        return keys
    return _DIRECT_KEY.findall(prompt_text)
