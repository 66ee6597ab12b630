"""Command-line entry point.

    cdrwork synth      --out DIR --seed N
    cdrwork features   --data DIR --out DIR
    cdrwork train      --features DIR --labels FILE --out DIR --seed N
    cdrwork eval       --features DIR --labels FILE --models DIR --out DIR
    cdrwork importance --features DIR --labels FILE --models DIR --out DIR
    cdrwork aggregate  --features DIR --models DIR --towers FILE --out DIR
    cdrwork run-all    --out DIR --seed N [--data DIR]

Failures print one JSON line ``{"error": <code>, "message": ...}`` on
stderr and exit nonzero. Every command writes ``manifest.json`` into its
output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .evaluate import EvalReport, evaluate, write_summary
from .features import (FeatureSchema, extract_all, parse_utc_offset, read_features, read_home_towers,
                       read_schema, write_features, write_home_towers, write_schema)
from .geo import aggregate_by_home_tower, write_geojson, write_tower_csv
from .importance import (build_predictor_network, gedeon_importance, merge_groups, restrict_and_retrain,
                         write_edges, write_importance)
from .ingest import PROFESSIONS, IngestError, SchemaConfig, load_directory, load_tower_registry, parse_label_file
from .model import ModelInputError, ModelSpec, TrainedModel, TrainingError, classify, predict
from .pipeline import run_profession
from .prep import PrepError, SchemaMismatchError
from .synth import SynthConfig, generate, shuffle_labels, write_labels

logger = logging.getLogger("cdrwork")

DATA_FILES = ("cdr.csv", "topup.csv", "handset.csv", "towers.csv", "labels.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def write_manifest(out_dir: Path, command: str, args, inputs: dict[str, Path], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": _config_echo(args),
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items()) if Path(p).is_file()},
        "versions": {"cdrwork": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    """Order-preserving map; results do not depend on ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def _load_feature_dir(features_dir):
    d = Path(features_dir)
    schema = read_schema(_require_file(d / "schema.json"))
    manifest = d / "manifest.json"
    if manifest.is_file():
        recorded = json.loads(manifest.read_text(encoding="utf-8")).get("schema_hash")
        if recorded and recorded != schema.hash:
            raise SchemaMismatchError(f"{d}: features were built under schema {recorded[:12]}, "
                                      f"schema.json describes {schema.hash[:12]}")
    table = read_features(_require_file(d / "features.csv"), schema)
    return schema, table


def _load_labels(path) -> dict[str, str]:
    recs, _ = parse_label_file(_require_file(path))
    return {r.subscriber_id: r.profession for r in recs}


def _professions(args) -> list[str]:
    if not getattr(args, "professions", None):
        return list(PROFESSIONS)
    names = [p.strip() for p in args.professions.split(",") if p.strip()]
    unknown = [p for p in names if p not in PROFESSIONS]
    if unknown:
        raise ValueError(f"unknown professions: {unknown}")
    return names


def _model_spec(args) -> ModelSpec:
    return ModelSpec(
        hidden_sizes=tuple(int(h) for h in args.hidden.split(",")),
        input_dropout=args.input_dropout,
        hidden_dropout=args.hidden_dropout,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _model_dirs(models_dir) -> list[Path]:
    d = Path(models_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"missing models directory: {d}")
    dirs = sorted(p.parent for p in d.glob("*/model.json"))
    if not dirs:
        raise FileNotFoundError(f"no trained model files under {d}")
    order = {p: i for i, p in enumerate(PROFESSIONS)}
    return sorted(dirs, key=lambda p: (order.get(p.name, len(order)), p.name))


def _load_model(model_dir: Path, schema: FeatureSchema) -> TrainedModel:
    model = TrainedModel.load(model_dir / "model.json")
    if model.schema_hash != schema.hash:
        raise SchemaMismatchError(
            f"model {model_dir / 'model.json'} was trained on schema {model.schema_hash[:12]}, "
            f"features use {schema.hash[:12]}")
    return model


def _read_split(model_dir: Path) -> dict:
    return json.loads(_require_file(model_dir / "split.json").read_text(encoding="utf-8"))


def _rows(table, ids: Sequence[str]) -> np.ndarray:
    pos = {s: i for i, s in enumerate(table.subscriber_ids)}
    missing = [s for s in ids if s not in pos]
    if missing:
        raise ValueError(f"{len(missing)} subscribers of the split are absent from features.csv")
    return np.array([pos[s] for s in ids], dtype=int)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = SynthConfig.from_json(args.config).to_dict() if args.config else SynthConfig().to_dict()
    cfg.update(seed=args.seed)
    for key in ("n_subscribers", "n_towers", "days"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    config = SynthConfig.from_dict(cfg)
    paths = generate(config, out)
    if args.shuffle_labels:
        recs, _ = parse_label_file(paths["labels"])
        write_labels(paths["labels"], shuffle_labels(recs, args.seed))
    (out / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "synth", args, {}, {"outputs": {p.name: sha256_file(p) for p in paths.values()}})
    return 0


def cmd_features(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in DATA_FILES[:4]:
        _require_file(data / name)
    window_end = None
    if args.window_start is not None and args.window_days is not None:
        window_end = args.window_start + args.window_days * 86400
    raw = load_directory(data, SchemaConfig(window_start=args.window_start, window_end=window_end))
    schema = FeatureSchema(night_window=(args.night_start, args.night_end),
                           utc_offset_s=parse_utc_offset(args.utc_offset),
                           window_start=args.window_start, window_days=args.window_days)
    vectors, ctx = extract_all(raw.timelines, raw.registry, schema)
    write_features(out / "features.csv", vectors, ctx.schema)
    write_schema(out / "schema.json", ctx.schema)
    write_home_towers(out / "home_towers.csv", raw.timelines, ctx.schema)
    with (out / "rejects.csv").open("w", encoding="utf-8") as fh:
        fh.write("file,line_no,reason\n")
        for fname, rejects in sorted(raw.rejects.items()):
            for r in rejects:
                fh.write(f"{fname},{r.line_no},{r.reason.replace(',', ';')}\n")
    write_manifest(out, "features", args, {n: data / n for n in DATA_FILES},
                   {"schema_hash": ctx.schema.hash, "n_subscribers": len(vectors)})
    return 0


def _train_one(job):
    table, labels, profession, spec, schema_hash, version = job
    try:
        return run_profession(table, labels, profession, spec, schema_hash, version)
    except PrepError as exc:
        return exc


def _write_run(out: Path, run) -> None:
    d = out / run.profession
    d.mkdir(parents=True, exist_ok=True)
    run.model.save(d / "model.json")
    (d / "split.json").write_text(json.dumps({"train_ids": run.train_ids, "test_ids": run.test_ids}) + "\n")


def cmd_train(args) -> int:
    schema, table = _load_feature_dir(args.features)
    labels = _load_labels(args.labels)
    spec = _model_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profs = _professions(args)
    jobs = [(table, labels, p, spec, schema.hash, schema.version) for p in profs]
    skipped = {}
    for prof, res in zip(profs, _map(_train_one, jobs, args.threads)):
        if isinstance(res, Exception):
            logger.warning("skipping %s: %s", prof, res)
            skipped[prof] = str(res)
            continue
        _write_run(out, res)
    write_manifest(out, "train", args,
                   {"features.csv": Path(args.features) / "features.csv",
                    "schema.json": Path(args.features) / "schema.json", "labels.csv": Path(args.labels)},
                   {"skipped": skipped, "schema_hash": schema.hash})
    return 0


def _evaluate_dir(model_dir: Path, schema, table, labels, threshold, ci_method) -> EvalReport:
    model = _load_model(model_dir, schema)
    split = _read_split(model_dir)
    prof = model.profession
    lab_ids = [s for s in table.subscriber_ids if s in labels]
    prevalence = float(np.mean([labels[s] == prof for s in lab_ids]))
    train_rows = _rows(table, split["train_ids"])
    test_rows = _rows(table, split["test_ids"])
    y_train = np.array([labels[s] == prof for s in split["train_ids"]])
    y_test = np.array([labels[s] == prof for s in split["test_ids"]])
    train_pred = classify(predict(model, table.matrix[train_rows], table.names), threshold)
    test_pred = classify(predict(model, table.matrix[test_rows], table.names), threshold)
    return evaluate(prof, test_pred, y_test, prevalence,
                    train_accuracy=float(np.mean(train_pred == y_train)), ci_method=ci_method)


def cmd_eval(args) -> int:
    schema, table = _load_feature_dir(args.features)
    labels = _load_labels(args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for d in _model_dirs(args.models):
        report = _evaluate_dir(d, schema, table, labels, args.threshold, args.ci)
        (out / d.name).mkdir(exist_ok=True)
        (out / d.name / "eval_report.json").write_text(report.to_json())
        reports.append(report)
    write_summary(out / "eval_summary.csv", reports)
    write_manifest(out, "eval", args, {"features.csv": Path(args.features) / "features.csv",
                                       "labels.csv": Path(args.labels)})
    return 0


def _retrain_one(job):
    table, labels, ranking, spec, k, schema_hash, version = job
    try:
        return restrict_and_retrain(table, labels, ranking, spec, k=k,
                                    schema_hash=schema_hash, schema_version=version)
    except PrepError as exc:
        return exc


def cmd_importance(args) -> int:
    schema, table = _load_feature_dir(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = [_load_model(d, schema) for d in _model_dirs(args.models)]
    rankings = [gedeon_importance(m) for m in models]
    reported = [merge_groups(r) for r in rankings]
    write_importance(out / "importance.csv", reported)
    write_edges(out / "network_edges.csv", build_predictor_network(reported, top_k=args.network_k))
    if args.retrain:
        labels = _load_labels(args.labels)
        k = min(args.top_k, len(table.names))
        jobs = [(table, labels, r, m.spec, k, schema.hash, schema.version) for r, m in zip(rankings, models)]
        restricted = out / "restricted"
        restricted.mkdir(exist_ok=True)
        reports = []
        for res in _map(_retrain_one, jobs, args.threads):
            if isinstance(res, Exception):
                logger.warning("restricted retrain skipped: %s", res)
                continue
            _write_run(restricted, res)
            (restricted / res.profession / "eval_report.json").write_text(res.report.to_json())
            reports.append(res.report)
        write_summary(out / f"eval_summary_top{k}.csv", reports)
    write_manifest(out, "importance", args, {"features.csv": Path(args.features) / "features.csv"})
    return 0


def cmd_aggregate(args) -> int:
    schema, table = _load_feature_dir(args.features)
    registry = load_tower_registry(_require_file(args.towers))
    homes = read_home_towers(_require_file(Path(args.features) / "home_towers.csv"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skipped = {}
    for d in _model_dirs(args.models):
        model = _load_model(d, schema)
        test_ids = _read_split(d)["test_ids"]
        prob = predict(model, table.matrix[_rows(table, test_ids)], table.names)
        values = prob if args.use_probabilities else classify(prob, args.threshold).astype(float)
        aggs, n_skip = aggregate_by_home_tower(dict(zip(test_ids, values.tolist())), homes, registry,
                                               min_count=args.min_count)
        (out / d.name).mkdir(exist_ok=True)
        write_geojson(out / d.name / "towers_rates.geojson", aggs)
        write_tower_csv(out / d.name / "towers_rates.csv", aggs)
        skipped[d.name] = n_skip
    write_manifest(out, "aggregate", args, {"towers.csv": Path(args.towers)},
                   {"subscribers_without_home_tower": skipped})
    return 0


def cmd_run_all(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        data = Path(args.data)
    else:
        data = out / "data"
        cmd_synth(argparse.Namespace(out=str(data), seed=args.seed, config=args.synth_config,
                                     n_subscribers=args.n_subscribers, n_towers=None, days=None,
                                     shuffle_labels=args.shuffle_labels))
    stage = dict(vars(args))
    feats, models = out / "features", out / "models"
    cmd_features(argparse.Namespace(**{**stage, "data": str(data), "out": str(feats)}))
    cmd_train(argparse.Namespace(**{**stage, "features": str(feats), "labels": str(data / "labels.csv"),
                                    "out": str(models)}))
    common = {**stage, "features": str(feats), "labels": str(data / "labels.csv"), "models": str(models)}
    cmd_eval(argparse.Namespace(**{**common, "out": str(out / "eval")}))
    cmd_importance(argparse.Namespace(**{**common, "out": str(out / "importance")}))
    cmd_aggregate(argparse.Namespace(**{**common, "towers": str(data / "towers.csv"), "out": str(out / "geo")}))
    (out / "eval_summary.csv").write_bytes((out / "eval" / "eval_summary.csv").read_bytes())
    write_manifest(out, "run-all", args, {n: data / n for n in DATA_FILES})
    return 0


# -- argument parsing -------------------------------------------------------

def _add_feature_opts(p):
    p.add_argument("--night-start", type=int, default=19, help="local hour the night window opens")
    p.add_argument("--night-end", type=int, default=5, help="local hour the night window closes")
    p.add_argument("--utc-offset", default="+06:00", help="market-local offset used for the night window")
    p.add_argument("--window-start", type=int, default=None, help="observation start (UTC seconds)")
    p.add_argument("--window-days", type=int, default=None, help="observation length in days")


def _add_model_opts(p):
    p.add_argument("--professions", default=None, help="comma-separated subset (default: all 18)")
    p.add_argument("--hidden", default="64,64", help="hidden layer widths")
    p.add_argument("--input-dropout", type=float, default=0.1)
    p.add_argument("--hidden-dropout", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--threads", type=int, default=1, help="parallel worker processes")


def _add_eval_opts(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--ci", choices=("wald", "wilson"), default="wald")


def _add_importance_opts(p):
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--network-k", type=int, default=5)
    p.add_argument("--no-retrain", dest="retrain", action="store_false")


def _add_geo_opts(p):
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--use-probabilities", action="store_true", help="average probabilities, not classes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdrwork", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="SynthConfig JSON file")
    p.add_argument("--n-subscribers", type=int, default=None)
    p.add_argument("--n-towers", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--shuffle-labels", action="store_true", help="write permuted labels (negative control)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract per-subscriber features")
    p.add_argument("--data", required=True, help="directory with cdr/topup/handset/towers CSVs")
    p.add_argument("--out", required=True)
    _add_feature_opts(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one classifier per profession")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_model_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained models on their test splits")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    _add_eval_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("importance", help="rank features and retrain on the top k")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_importance_opts(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("aggregate", help="per-tower rates of out-of-sample predictions")
    p.add_argument("--features", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--towers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_geo_opts(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("run-all", help="synth (optional) through aggregate in one go")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", default=None, help="existing input directory; synthesized when omitted")
    p.add_argument("--synth-config", default=None)
    p.add_argument("--n-subscribers", type=int, default=None)
    p.add_argument("--shuffle-labels", action="store_true")
    _add_feature_opts(p)
    _add_model_opts(p)
    _add_eval_opts(p)
    _add_importance_opts(p)
    _add_geo_opts(p)
    p.set_defaults(func=cmd_run_all)
    return parser


_ERROR_CODES = (
    (FileNotFoundError, "missing_input"),
    (SchemaMismatchError, "schema_mismatch"),
    (IngestError, "invalid_input"),
    (ModelInputError, "invalid_model"),
    (TrainingError, "training_failed"),
    (KeyError, "invalid_input"),
    (ValueError, "invalid_argument"),
)


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return status


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except tuple(cls for cls, _ in _ERROR_CODES) as exc:
        code = next(c for cls, c in _ERROR_CODES if isinstance(exc, cls))
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _fail(code, str(msg).replace("\n", " "), 1)


if __name__ == "__main__":
    sys.exit(main())
