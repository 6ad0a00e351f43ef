"""``cityprobe`` command line.

Exit codes: 0 on success, 2 when more than 20% of the LLM answers in a run
could not be parsed, 3 on any hard error (including bad arguments).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics, ml, report
from .dataset import (
    TaskSpec,
    assign_folds,
    load_task,
    load_task_meta,
    normalize_region_targets,
    read_place_column,
    write_targets,
)
from .errors import CityProbeError
from .features import FeatureMatrix, assemble_explicit, assemble_implicit, load_hidden_manifest
from .llm_gateway import ProviderConfig, RecordStore
from .parsing import FeatureSchema
from .pipeline import (
    RunOptions,
    ask_direct,
    extract_features,
    identify_features,
    rerun,
    run_method,
)

EXIT_OK, EXIT_PARSE_HEAVY, EXIT_ERROR = 0, 2, 3
DROP_LIMIT = 0.2

log = logging.getLogger("cityprobe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--mode", choices=("live", "record", "replay"), default="replay")
    g.add_argument("--store", help="record/replay JSONL store")
    g.add_argument("--lang", choices=("en", "zh"), default="en", help="prompt language")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="runs", help="output directory")
    g.add_argument("--model", default="gpt-4o")
    g.add_argument("--temperature", type=float, default=0.01)
    g.add_argument("--base-url", default="https://api.openai.com/v1")
    g.add_argument("--max-tokens", type=int, default=512)
    g.add_argument("--repeats", type=int, default=1)
    g.add_argument("--parallel", type=int, default=4)
    g.add_argument("--retries", type=int, default=3)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _provider(args) -> ProviderConfig:
    return ProviderConfig(
        base_url=args.base_url,
        model_name=args.model,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        max_parallel=args.parallel,
        retries=args.retries,
    )


def _store(args):
    if args.store is None:
        if args.mode != "live":
            raise CityProbeError(f"--mode {args.mode} needs --store")
        return None
    return RecordStore(args.store)


def _task(args) -> TaskSpec:
    return load_task_meta(args.task, getattr(args, "data", None))


def _task_from_csv(csv_path, task_id="task") -> TaskSpec:
    return TaskSpec(task_id, task_id, tuple(read_place_column(csv_path)))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path | None = None):
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is not None:
        path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _read_values(path):
    """Numbers from a JSON list / {key: number} / {key: [numbers]} or a CSV column."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            col = next((c for c in ("value", "pred", "target") if c in (reader.fieldnames or [])), None)
            if col is None:
                raise CityProbeError(f"{path}: expected a value, pred or target column")
            return [float(r[col]) for r in reader if (r[col] or "").strip()]
    return json.loads(path.read_text(encoding="utf-8"))


def _flat(values):
    if isinstance(values, dict):
        out = []
        for v in values.values():
            out.extend(v if isinstance(v, list) else [v])
        return [float(v) for v in out]
    return [float(v) for v in values]


def _gate(drop_rate: float) -> int:
    if drop_rate > DROP_LIMIT:
        log.warning("%.0f%% of answers were rejected", 100 * drop_rate)
        return EXIT_PARSE_HEAVY
    return EXIT_OK


def _write_rejects(path: Path, rejects):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_ingest(args):
    task = _task(args)
    table = load_task(args.data, task)
    if args.normalize:
        table = normalize_region_targets(table)
    out = _out_dir(args)
    write_targets(table, out / f"{task.task_id}_targets.csv")
    _dump({"task_id": task.task_id, "entries": len(table), "dropped": table.dropped,
           "normalized": table.normalized, "written": str(out / f"{task.task_id}_targets.csv")})
    return EXIT_OK


def _run_options(args, **extra) -> RunOptions:
    return RunOptions(
        targets=args.data,
        mode=args.mode,
        store=args.store,
        language=args.lang,
        seed=args.seed,
        out_root=args.out,
        **extra,
    )


def cmd_direct(args):
    task = _task(args)
    cfg = _provider(args)
    outcome = run_method(task, "DirectAsk", cfg, _run_options(args, normalize=args.normalize))
    code = _gate(outcome.manifest.drop_rate)
    if args.repeats > 1:
        places = [p for p in task.places if not args.place or p.rendered in args.place]
        runs, _ = ask_direct(task, places, cfg, _store(args), args.mode, args.lang, repeats=args.repeats)
        series = {p.rendered: [a.pred for a in v] for p, v in runs.items()}
        (outcome.run_dir / "repeats.json").write_text(json.dumps(series, indent=1, ensure_ascii=False) + "\n",
                                                      encoding="utf-8")
        rep = diagnostics.detect_variance({k: v for k, v in series.items() if len(v) >= 2})
        report.emit_deviation_plot({k: s.rescaled_deviation for k, s in rep.per_subject.items()},
                                   outcome.run_dir / "deviation.svg")
    _dump({"run_dir": str(outcome.run_dir), **outcome.result.to_dict()})
    return code


def cmd_identify(args):
    task = _task(args)
    schema, raw = identify_features(task, _provider(args), _store(args), args.mode, args.n_features, args.lang)
    _dump(schema.to_dict(), _out_dir(args) / "schema.json")
    return EXIT_OK


def cmd_extract(args):
    task = _task(args)
    schema = FeatureSchema.from_dict(json.loads(Path(args.schema).read_text(encoding="utf-8")))
    answers, rejects = extract_features(list(task.places), schema, _provider(args), _store(args),
                                        args.mode, args.lang)
    out = _out_dir(args)
    _write_rejects(out / "rejects.jsonl", rejects)
    matrix = assemble_explicit(answers, schema, task.places)
    matrix.save(out / "features.json")
    _dump({"features": str(out / "features.json"), "rows": matrix.shape[0], "columns": matrix.feature_names,
           "rejects": len(rejects)})
    return _gate(len(rejects) / len(task.places))


def cmd_imp_features(args):
    matrix = assemble_implicit(load_hidden_manifest(args.manifest), args.out_dim, args.seed)
    out = _out_dir(args)
    matrix.save(out / "features.json")
    _dump({"features": str(out / "features.json"), "shape": list(matrix.shape), "seed": args.seed})
    return EXIT_OK


def cmd_train(args):
    matrix = FeatureMatrix.load(args.features)
    task = _task_from_csv(args.targets, args.task_id)
    table = load_task(args.targets, task)
    if args.normalize:
        table = normalize_region_targets(replace(table, level="region"))
    places = [p for p in matrix.places if p in table.entries]
    folds = assign_folds(places, args.k, args.seed)
    if len(places) < len(matrix.places):
        keep = [matrix.places.index(p) for p in places]
        matrix = FeatureMatrix(places, matrix.feature_names, matrix.values[keep], matrix.provenance,
                               matrix.omitted + len(matrix.places) - len(places))
    specs = ml.specs_from_names(args.models.split(","), args.seed)
    result = ml.cross_validate(matrix, table, folds, specs, args.task_id)
    result.seeds = {"folds": args.seed, "models": args.seed}
    result.drop_counts = {"target_rows": table.drop_count, "omitted_places": matrix.omitted}
    result.notes["targets_normalized"] = bool(args.normalize)
    out = _out_dir(args)
    (out / "eval.json").write_text(result.to_json(), encoding="utf-8")
    sys.stdout.write(result.to_json())
    return EXIT_OK


def cmd_detect(args):
    data = _read_values(args.answers)
    out = Path(args.out) if args.out != "runs" else None
    if args.kind == "generic":
        values = _flat(data)
        rep = diagnostics.detect_generic(values, args.m, args.threshold)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            report.emit_histogram(values, out / "generic_hist", xlabel="answer")
        _dump(rep.to_dict(), out / "generic.json" if out else None)
    else:
        if not isinstance(data, dict):
            raise CityProbeError("variance detection needs {subject: [answers...]}")
        rep = diagnostics.detect_variance({k: [float(x) for x in v] for k, v in data.items()}, args.cv_threshold)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            report.emit_deviation_plot({str(k): s.rescaled_deviation for k, s in rep.per_subject.items()},
                                       out / "deviation.svg")
        _dump(rep.to_dict(), out / "variance.json" if out else None)
    return EXIT_OK


def cmd_corr(args):
    matrix = FeatureMatrix.load(args.features)
    table = load_task(args.targets, _task_from_csv(args.targets))
    places = [p for p in matrix.places if p in table.entries]
    y = table.values(places)
    rows = []
    for name in matrix.feature_names:
        col = [matrix.values[matrix.places.index(p), matrix.feature_names.index(name)] for p in places]
        try:
            rows.append(diagnostics.pearson(col, y, feature=name))
        except CityProbeError as exc:
            log.warning("skipping %s: %s", name, exc)
    if args.csv_out:
        report.write_correlation_csv(rows, args.csv_out)
    report.write_correlation_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_report(args):
    if args.action == "run":
        task = _task(args)
        extra = dict(n_features=args.n_features, schema=args.schema, hidden_manifest=args.hidden_manifest,
                     k=args.k, out_dim=args.out_dim, models=tuple(args.models.split(",")), normalize=args.normalize)
        outcome = run_method(task, args.method, _provider(args), _run_options(args, **extra))
    elif args.action == "replay":
        outcome = rerun(args.manifest, out_root=args.out if args.out != "runs" else None)
    elif args.action == "histogram":
        h = report.emit_histogram(_flat(_read_values(args.values)), Path(args.out) / args.name,
                                  bin_width=args.bin_width)
        _dump({"bins": h.bins, "counts": h.counts})
        return EXIT_OK
    else:  # relative-error
        base_name, base = _named_value(args.baseline)
        table = diagnostics.relative_error_table(base, dict(_named_value(o) for o in args.others))
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["model", "rmse", "error"])
        w.writerow([base_name, f"{base:.3f}", "/"])
        for o in args.others:
            name, value = _named_value(o)
            w.writerow([name, f"{value:.3f}", table[name].display])
        return EXIT_OK
    _dump({"run_dir": str(outcome.run_dir), **outcome.result.to_dict()})
    return _gate(outcome.manifest.drop_rate)


def _named_value(text: str):
    name, sep, value = text.rpartition("=")
    if not sep:
        raise CityProbeError(f"expected NAME=VALUE, got {text!r}")
    return name, float(value)


def cmd_rgb(args):
    matrix = FeatureMatrix.load(args.features)
    out = _out_dir(args)
    zones = report.emit_rgb_map(matrix, out / "rgb_zones.csv", rescale=args.rescale)
    _dump({"zones": len(zones), "csv": str(out / "rgb_zones.csv")})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="cityprobe", description=__doc__.splitlines()[0].strip("`"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="load and check a target CSV")
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("direct", parents=[common], help="Direct-Ask every place and score the answers")
    p.add_argument("--task", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--place", action="append", help="limit --repeats to this place (repeatable)")
    p.add_argument("--normalize", action="store_true", default=None)
    p.set_defaults(func=cmd_direct)

    p = sub.add_parser("identify", parents=[common], help="ask which features matter for the target")
    p.add_argument("--task", required=True)
    p.add_argument("--data")
    p.add_argument("--n-features", type=int, default=5)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("extract", parents=[common], help="ask for feature scores per place")
    p.add_argument("--task", required=True)
    p.add_argument("--data")
    p.add_argument("--schema", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("imp-features", parents=[common], help="pool and project hidden-state files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dim", type=int, default=32)
    p.set_defaults(func=cmd_imp_features)

    p = sub.add_parser("train", parents=[common], help="cross-validate regressors on a feature matrix")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--models", default="linear,tree,forest,gbt")
    p.add_argument("--task-id", default="task")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="generic-value or cross-generation variance check")
    p.add_argument("kind", choices=("generic", "variance"))
    p.add_argument("--answers", required=True)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cv-threshold", type=float, default=0.2)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("corr", parents=[common], help="Pearson r and p-value per feature")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("report", help="full runs, replays and figures")
    rsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    r = rsub.add_parser("run", parents=[common], help="run one method end to end")
    r.add_argument("--task", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--method", required=True, help="exp, imp, direct or none")
    r.add_argument("--n-features", type=int, default=5)
    r.add_argument("--schema")
    r.add_argument("--hidden-manifest")
    r.add_argument("--k", type=int, default=5)
    r.add_argument("--out-dim", type=int, default=32)
    r.add_argument("--models", default="linear,tree,forest,gbt")
    r.add_argument("--normalize", action="store_true", default=None)
    r = rsub.add_parser("replay", parents=[common], help="re-run a recorded run from its manifest")
    r.add_argument("--manifest", required=True)
    r = rsub.add_parser("histogram", parents=[common], help="CSV + SVG histogram of values")
    r.add_argument("--values", required=True)
    r.add_argument("--bin-width", type=float)
    r.add_argument("--name", default="histogram")
    r = rsub.add_parser("relative-error", parents=[common], help="percent RMSE increase over a baseline")
    r.add_argument("--baseline", required=True, help="NAME=RMSE")
    r.add_argument("others", nargs="+", help="NAME=RMSE")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rgb", parents=[common], help="zone,r,g,b colours from three feature columns")
    p.add_argument("--features", required=True)
    p.add_argument("--rescale", action="store_true", help="features are on 0-10; multiply by 25.5")
    p.set_defaults(func=cmd_rgb)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CityProbeError, OSError, ValueError, KeyError) as exc:
        print(f"cityprobe: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
