"""Synthetic tasks with a pre-filled record store, for offline runs and tests.

The "oracle provider" answers extraction prompts with feature scores whose
linear combination is the target: ``y = 3*f1 - 2*f2 + noise``, with the
remaining features pure noise. Responses are written in a few different
styles (bare JSON, fenced, wrapped in prose) so the parser is exercised.
"""

from __future__ import annotations

import argparse
import csv
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataset import PlaceId, TaskSpec
from .features import write_hst
from .llm_gateway import ProviderConfig, QueryRecord, RecordStore, fingerprint
from .parsing import Feature, FeatureSchema
from .prompting import build_direct_prompt, build_extraction_prompt, build_identification_prompt

FEATURES = (
    Feature("transit_access", "How easy it is to reach mass rapid transit (0.0: very low, 10.0: very high)"),
    Feature("green_space", "Share of land covered by parks and green space (0.0: very low, 10.0: very high)"),
    Feature("street_noise", "Typical street noise level (0.0: very low, 10.0: very high)"),
    Feature("retail_density", "Density of shops and retail outlets (0.0: very low, 10.0: very high)"),
)
COEFS = (3.0, -2.0, 0.0, 0.0)
FIXED_TIME = "2024-01-01T00:00:00+00:00"


@dataclass
class SyntheticTask:
    root: Path
    task: TaskSpec
    task_path: Path
    targets_path: Path
    store_path: Path
    hidden_manifest: Path | None
    features: np.ndarray
    targets: np.ndarray


def _wrap(payload: dict, style: int) -> str:
    body = json.dumps(payload)
    if style == 0:
        return body
    if style == 1:
        return "```json\n" + json.dumps(payload, indent=2) + "\n```"
    return "Here is my estimate based on what I know.\n" + body + "\nThese are approximate scores."


def _record(cfg: ProviderConfig, prompt_text: str, raw: str, repeat_index: int = 0) -> QueryRecord:
    return QueryRecord(
        fingerprint=fingerprint(cfg.model_name, cfg.temperature, prompt_text, repeat_index),
        prompt=prompt_text,
        raw_response=raw,
        provider="synthetic-oracle",
        timestamp=FIXED_TIME,
        repeat_index=repeat_index,
        model_name=cfg.model_name,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
    )


def make_oracle_task(out_dir: str | Path, seed: int = 0, n_places: int = 100, noise_sd: float = 0.1,
                     hidden_places: int = 0, hidden_shape: tuple[int, int] = (6, 16),
                     cfg: ProviderConfig | None = None, task_id: str = "synthetic-linear") -> SyntheticTask:
    cfg = cfg or ProviderConfig()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    places = tuple(PlaceId(f"Town {i:03d}", "Testland") for i in range(n_places))
    task = TaskSpec(task_id, "Synthetic Livability Index", places, unit="points", level="city")
    f = np.round(rng.uniform(0.0, 10.0, size=(n_places, len(FEATURES))), 1)
    y = f @ np.array(COEFS) + rng.normal(0.0, noise_sd, size=n_places)

    task_path = root / "task.json"
    task_path.write_text(json.dumps(task.to_dict(), indent=1) + "\n", encoding="utf-8")
    targets_path = root / "targets.csv"
    with open(targets_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["place", "target"])
        for p, v in zip(places, y):
            w.writerow([p.rendered, repr(float(v))])

    store_path = root / "store.jsonl"
    if store_path.exists():
        store_path.unlink()
    store = RecordStore(store_path)
    schema = FeatureSchema(FEATURES)
    ident = build_identification_prompt(task, len(FEATURES))
    store.append(_record(cfg, ident.text, _wrap(
        {"features": [{"name": ft.name, "description": ft.description} for ft in FEATURES]}, 1)))
    for i, place in enumerate(places):
        prompt = build_extraction_prompt(place, schema)
        store.append(_record(cfg, prompt.text, _wrap(dict(zip(schema.names, f[i].tolist())), i % 3)))
        direct = build_direct_prompt(place, task)
        guess = float(np.round(y[i] + rng.normal(0.0, 3.0), 1))
        pred = f"{guess} points" if i % 4 == 0 else guess
        store.append(_record(cfg, direct.text, _wrap({"zone": place.rendered, "pred": pred}, i % 3)))

    manifest = None
    if hidden_places:
        hdir = root / "hidden"
        hdir.mkdir(exist_ok=True)
        mapping = {}
        n_tok, dim = hidden_shape
        for i, place in enumerate(places[:hidden_places]):
            # leading dims carry the place's feature scores so the implicit path has signal
            data = 0.1 * rng.standard_normal((n_tok, dim))
            k = min(dim, len(FEATURES))
            data[:, :k] += f[i, :k]
            data = data.astype(np.float32)
            name = f"place_{i:03d}.hst"
            write_hst(hdir / name, data)
            mapping[place.rendered] = name
        manifest = hdir / "manifest.json"
        manifest.write_text(json.dumps(mapping, indent=1) + "\n", encoding="utf-8")
    return SyntheticTask(root, task, task_path, targets_path, store_path, manifest, f, y)


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write a synthetic task with a pre-filled record store")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--places", type=int, default=100)
    ap.add_argument("--hidden-places", type=int, default=3)
    args = ap.parse_args(argv)
    made = make_oracle_task(args.out, args.seed, args.places, hidden_places=args.hidden_places)
    print(f"wrote {made.store_path} ({args.places} places) at {datetime.now(timezone.utc):%Y-%m-%d}")


if __name__ == "__main__":
    main()
