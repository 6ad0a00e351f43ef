"""Render the direct-ask, feature-identification and feature-extraction prompts."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .dataset import PlaceId, TaskSpec
from .errors import EmptySchema, UnknownPlace
from .parsing import FeatureSchema

LANGUAGES = ("en", "zh")
_LANG_ALIASES = {"english": "en", "en": "en", "chinese": "zh", "zh": "zh"}
_SLOT = re.compile(r"\{([A-Za-z]+)\}")
_SPACES = re.compile(r" {2,}")


class PromptKind(str, Enum):
    DIRECT = "DirectAsk"
    IDENTIFY = "FeatureIdentification"
    EXTRACT = "FeatureExtraction"


_TEMPLATE_FILE = {
    PromptKind.DIRECT: "direct.txt",
    PromptKind.IDENTIFY: "identify.txt",
    PromptKind.EXTRACT: "extract.txt",
}


@dataclass(frozen=True)
class RenderedPrompt:
    kind: PromptKind
    text: str
    language: str
    slots: tuple[tuple[str, str], ...]

    def slot(self, name: str) -> str:
        return dict(self.slots)[name]


def language_code(language: str) -> str:
    try:
        return _LANG_ALIASES[language.lower()]
    except KeyError:
        raise ValueError(f"unsupported prompt language {language!r}") from None


@lru_cache(maxsize=None)
def _read(language: str, filename: str) -> str:
    return resources.files("cityprobe").joinpath("templates", language, filename).read_text(encoding="utf-8")


def load_template(kind: PromptKind, language: str = "en") -> str:
    return _read(language_code(language), _TEMPLATE_FILE[kind])


def _fragments(language: str) -> dict:
    return json.loads(_read(language_code(language), "fragments.json"))


def _squash(value: str) -> str:
    return _SPACES.sub(" ", str(value).strip())


def render(template: str, slots: dict[str, str]) -> str:
    """Substitute ``{Slot}`` markers in one pass, then normalize whitespace.

    Runs of spaces collapse to one, trailing spaces are dropped and the text
    ends with exactly one newline.
    """

    def sub(m):
        key = m.group(1)
        return slots[key] if key in slots else m.group(0)

    text = _SLOT.sub(sub, template)
    lines = [_SPACES.sub(" ", line).rstrip() for line in text.splitlines()]
    return "\n".join(lines).rstrip("\n") + "\n"


def _fmt_bound(x: float) -> str:
    s = f"{x:.1f}"
    return s if float(s) == x else repr(float(x))


def build_direct_prompt(place: PlaceId, task: TaskSpec, language: str = "en") -> RenderedPrompt:
    if place not in task.places:
        raise UnknownPlace(f"{place.rendered!r} is not a place of task {task.task_id!r}")
    lang = language_code(language)
    slots = {
        "Place": _squash(place.rendered),
        "Target": _squash(task.target_name),
        "Unit": _squash(task.unit),
    }
    text = render(load_template(PromptKind.DIRECT, lang), slots)
    return RenderedPrompt(PromptKind.DIRECT, text, lang, tuple(slots.items()))


def build_identification_prompt(task: TaskSpec, n_features: int = 5, language: str = "en") -> RenderedPrompt:
    if not 1 <= n_features <= 16:
        raise ValueError(f"n_features must be in [1, 16], got {n_features}")
    lang = language_code(language)
    low, high = task.scale_hint or (0.0, 10.0)
    slots = {
        "Target": _squash(task.target_name),
        "Unit": _squash(task.unit),
        "N": str(n_features),
        "Low": _fmt_bound(low),
        "High": _fmt_bound(high),
    }
    text = render(load_template(PromptKind.IDENTIFY, lang), slots)
    return RenderedPrompt(PromptKind.IDENTIFY, text, lang, tuple(slots.items()))


def _join_names(names: list[str], frag: dict) -> str:
    wrapped = [f"{frag['list_open']}{n}{frag['list_close']}" for n in names]
    if len(wrapped) == 1:
        return wrapped[0]
    if len(wrapped) == 2:
        return wrapped[0] + frag["list_and"] + wrapped[1]
    return frag["list_sep"].join(wrapped[:-1]) + frag["list_last_and"] + wrapped[-1]


def build_extraction_prompt(place: PlaceId, schema: FeatureSchema, language: str = "en") -> RenderedPrompt:
    if schema is None or not schema.features:
        raise EmptySchema("extraction needs at least one feature")
    low, high = schema.scale
    if not high > low:
        raise EmptySchema(f"invalid scale {schema.scale}")
    lang = language_code(language)
    frag = _fragments(lang)
    names = [_squash(f.name) for f in schema.features]
    descriptions = "\n".join(
        frag["description_line"].format(name=n, description=_squash(f.description))
        for n, f in zip(names, schema.features)
    )
    lo_s, hi_s = _fmt_bound(low), _fmt_bound(high)
    keys = frag["key_sep"].join(frag["key_line"].format(name=n, low=lo_s, high=hi_s) for n in names)
    slots = {
        "Place": _squash(place.rendered),
        "FeatureList": _join_names(names, frag),
        "FeatureDescriptions": descriptions,
        "FeatureKeys": keys,
    }
    text = render(load_template(PromptKind.EXTRACT, lang), slots)
    return RenderedPrompt(PromptKind.EXTRACT, text, lang, tuple(slots.items()))
