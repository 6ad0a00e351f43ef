"""End-to-end runs of the four compared methods, persisted under one directory per run."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from . import diagnostics, ml, report
from .dataset import TaskSpec, assign_folds, load_task, normalize_region_targets, write_targets
from .errors import CityProbeError, StageError
from .features import assemble_explicit, assemble_implicit, load_hidden_manifest
from .llm_gateway import ProviderConfig, RecordStore, query, query_many
from .parsing import FeatureSchema, parse_direct, parse_features, parse_schema
from .prompting import build_direct_prompt, build_extraction_prompt, build_identification_prompt

log = logging.getLogger(__name__)

METHOD_ALIASES = {
    "exp": "ExpFeature", "expfeature": "ExpFeature",
    "imp": "ImpFeature", "impfeature": "ImpFeature",
    "direct": "DirectAsk", "directask": "DirectAsk",
    "none": "NoFeature", "nofeature": "NoFeature",
}


def method_name(name: str) -> str:
    key = name.replace("-", "").replace("_", "").lower()
    if key not in METHOD_ALIASES:
        raise ValueError(f"unknown method {name!r}; use one of exp, imp, direct, none")
    return METHOD_ALIASES[key]


@dataclass
class RunOptions:
    targets: str
    mode: str = "replay"
    store: str | None = None
    language: str = "en"
    n_features: int = 5
    schema: str | None = None
    hidden_manifest: str | None = None
    k: int = 5
    seed: int = 0
    out_dim: int = 32
    models: tuple[str, ...] = ("linear", "tree", "forest", "gbt")
    normalize: bool | None = None  # None: normalize region-level tasks only
    out_root: str = "runs"
    figures: bool = True


@dataclass
class RunManifest:
    task: dict
    method: str
    language: str
    mode: str
    provider: dict
    seeds: dict
    store: str | None
    options: dict
    outputs: dict = field(default_factory=dict)
    drop_rate: float = 0.0
    started: str = ""
    finished: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunOutcome:
    result: ml.EvalResult
    manifest: RunManifest
    run_dir: Path


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (CityProbeError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")


def _run_dir(root: Path, task_id: str, method: str) -> Path:
    base = root / task_id / method
    stamp = _timestamp()
    path = base / stamp
    n = 1
    while path.exists():
        path = base / f"{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _open_store(options: RunOptions):
    if options.store is None:
        if options.mode != "live":
            raise ValueError(f"{options.mode} mode needs a record store")
        return None
    return RecordStore(options.store)


def identify_features(task: TaskSpec, cfg: ProviderConfig, store, mode: str, n_features: int,
                      language: str = "en") -> tuple[FeatureSchema, str]:
    prompt = build_identification_prompt(task, n_features, language)
    rec = query(prompt, cfg, store, mode)
    return parse_schema(rec.raw_response, n_features, task.scale_hint or (0.0, 10.0)), rec.raw_response


def extract_features(places, schema: FeatureSchema, cfg: ProviderConfig, store, mode: str,
                     language: str = "en"):
    """Query one extraction prompt per place; returns (answers, rejects)."""
    prompts = [build_extraction_prompt(p, schema, language) for p in places]
    records = query_many([(pr, 0) for pr in prompts], cfg, store, mode)
    answers, rejects = {}, []
    for place, rec in zip(places, records):
        try:
            answers[place] = parse_features(rec.raw_response, schema)
        except CityProbeError as exc:
            rejects.append({"place": place.rendered, "stage": "extract", "error": f"{type(exc).__name__}: {exc}",
                            "fingerprint": rec.fingerprint, "raw_response": rec.raw_response})
    return answers, rejects


def ask_direct(task: TaskSpec, places, cfg: ProviderConfig, store, mode: str, language: str = "en",
               repeats: int = 1):
    """Direct-ask every place ``repeats`` times; returns ({place: [ParsedDirect]}, rejects)."""
    jobs = [(build_direct_prompt(p, task, language), i) for p in places for i in range(repeats)]
    records = query_many(jobs, cfg, store, mode)
    answers = {p: [] for p in places}
    rejects = []
    for (place, _), rec in zip(((p, i) for p in places for i in range(repeats)), records):
        try:
            answers[place].append(parse_direct(rec.raw_response))
        except CityProbeError as exc:
            rejects.append({"place": place.rendered, "stage": "direct", "repeat_index": rec.repeat_index,
                            "error": f"{type(exc).__name__}: {exc}", "fingerprint": rec.fingerprint,
                            "raw_response": rec.raw_response})
    return {p: v for p, v in answers.items() if v}, rejects


def run_method(task: TaskSpec, method: str, cfg: ProviderConfig, options: RunOptions) -> RunOutcome:
    """Run one method end to end and persist every intermediate under a fresh run directory."""
    method = method_name(method)
    started = datetime.now(timezone.utc).isoformat()
    run_dir = _run_dir(Path(options.out_root), task.task_id, method)
    outputs = {"eval": "eval.json", "manifest": "manifest.json", "rejects": "rejects.jsonl"}
    rejects: list[dict] = []
    attempted = 0
    notes: dict = {}

    with stage("dataset"):
        table = load_task(options.targets, task)
        normalize = options.normalize if options.normalize is not None else task.level == "region"
        if normalize:
            table = normalize_region_targets(replace(table, level="region"))
            write_targets(table, run_dir / "targets_normalized.csv")
            outputs["targets_normalized"] = "targets_normalized.csv"
        notes["targets_normalized"] = bool(normalize)
        places = table.places

    seeds = {"folds": options.seed}
    if method == "NoFeature":
        with stage("ml"):
            folds = assign_folds(places, options.k, options.seed)
            result = ml.cross_validate_baseline(table, folds, task.task_id)

    elif method == "DirectAsk":
        with stage("gateway"):
            store = _open_store(options)
            answers, rejects = ask_direct(task, places, cfg, store, options.mode, options.language)
        attempted = len(places)
        first = {p: v[0] for p, v in answers.items()}
        (run_dir / "answers.json").write_text(
            json.dumps({p.rendered: a.pred for p, a in first.items()}, indent=1, ensure_ascii=False) + "\n",
            encoding="utf-8")
        outputs["answers"] = "answers.json"
        with stage("ml"):
            result = ml.evaluate_direct(first, table, task.task_id)
        if first:
            generic = diagnostics.detect_generic([a.pred for a in first.values()])
            notes["generic_values"] = {"top_values": generic.top_values, "top_share": generic.top_share,
                                       "flagged": generic.flagged}
            if options.figures:
                report.emit_histogram([a.pred for a in first.values()], run_dir / "answers_hist",
                                      title=task.target_name, xlabel="answer")
                outputs["histogram"] = "answers_hist.svg"

    elif method == "ExpFeature":
        with stage("gateway"):
            store = _open_store(options)
        if options.schema:
            with stage("parse"):
                schema = FeatureSchema.from_dict(json.loads(Path(options.schema).read_text(encoding="utf-8")))
        else:
            with stage("identify"):
                schema, _ = identify_features(task, cfg, store, options.mode, options.n_features, options.language)
        (run_dir / "schema.json").write_text(json.dumps(schema.to_dict(), indent=1) + "\n", encoding="utf-8")
        outputs["schema"] = "schema.json"
        with stage("extract"):
            answers, rejects = extract_features(places, schema, cfg, store, options.mode, options.language)
        attempted = len(places)
        with stage("features"):
            matrix = assemble_explicit(answers, schema, places)
            matrix.save(run_dir / "features.json")
            outputs["features"] = "features.json"
        notes["clamped_values"] = sum(len(a.clamped) for a in answers.values())
        with stage("ml"):
            folds = assign_folds(matrix.places, options.k, options.seed)
            result = ml.cross_validate(matrix, table, folds, ml.specs_from_names(options.models, options.seed),
                                       task.task_id, "ExpFeature")
        seeds["models"] = options.seed
        if options.figures:
            for name in matrix.feature_names:
                report.emit_histogram(matrix.column(name), run_dir / f"feature_{name}",
                                      bin_width=(schema.scale[1] - schema.scale[0]) / 40, xlabel=name)
            outputs["figures"] = [f"feature_{n}.svg" for n in matrix.feature_names]

    else:  # ImpFeature
        if not options.hidden_manifest:
            raise StageError("features", ValueError("ImpFeature needs a hidden-state manifest"))
        with stage("features"):
            wanted = set(places)
            tensors = [t for t in load_hidden_manifest(options.hidden_manifest) if t.place in wanted]
            order = {p: i for i, p in enumerate(places)}
            tensors.sort(key=lambda t: order[t.place])
            matrix = assemble_implicit(tensors, options.out_dim, options.seed)
            matrix.omitted = len(places) - len(tensors)
            matrix.save(run_dir / "features.json")
            outputs["features"] = "features.json"
        seeds["projection"] = options.seed
        seeds["models"] = options.seed
        with stage("ml"):
            folds = assign_folds(matrix.places, options.k, options.seed)
            result = ml.cross_validate(matrix, table, folds, ml.specs_from_names(options.models, options.seed),
                                       task.task_id, "ImpFeature")

    result.seeds = seeds
    drops = {"target_rows": table.drop_count, "parse_rejects": len(rejects)}
    if method in ("ExpFeature", "ImpFeature"):
        drops["omitted_places"] = matrix.omitted
    result.drop_counts = {**result.drop_counts, **drops}
    result.notes = {**result.notes, **notes}

    (run_dir / "eval.json").write_text(result.to_json(), encoding="utf-8")
    _write_jsonl(run_dir / "rejects.jsonl", rejects)
    manifest = RunManifest(
        task=task.to_dict(),
        method=method,
        language=options.language,
        mode=options.mode,
        provider=cfg.snapshot(),
        seeds=seeds,
        store=str(Path(options.store).resolve()) if options.store else None,
        options={k: v for k, v in asdict(options).items() if k not in ("mode", "store")},
        outputs=outputs,
        drop_rate=(len(rejects) / attempted) if attempted else 0.0,
        started=started,
        finished=datetime.now(timezone.utc).isoformat(),
    )
    manifest.options["models"] = list(options.models)
    for key in ("targets", "schema", "hidden_manifest", "out_root"):
        if manifest.options.get(key):
            manifest.options[key] = str(Path(manifest.options[key]).resolve())
    (run_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    log.info("%s/%s: mean RMSE %.6g -> %s", task.task_id, method, result.mean_rmse, run_dir)
    return RunOutcome(result, manifest, run_dir)


def rerun(manifest: RunManifest | str | Path, out_root: str | None = None) -> RunOutcome:
    """Replay a recorded run from its manifest; never touches the network."""
    if not isinstance(manifest, RunManifest):
        manifest = RunManifest.load(manifest)
    opts = dict(manifest.options)
    opts["models"] = tuple(opts.get("models", ()))
    if out_root is not None:
        opts["out_root"] = out_root
    options = RunOptions(mode="replay", store=manifest.store, **opts)
    task = TaskSpec.from_dict(manifest.task)
    return run_method(task, manifest.method, ProviderConfig(**manifest.provider), options)
