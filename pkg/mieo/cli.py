"""The ``mieo`` command line.

Every command that writes artifacts also writes a manifest holding its command
line, the resolved configuration, the seed and the SHA-256 digests of its
inputs. ``mieo replay --manifest <file>`` runs the recorded command line again.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
from pathlib import Path
import sys
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .autoencoder import MieoConfig, MieoModel, build_mieo, encode, impute, train_mieo
from .classifier import (
    ClassifierConfig,
    ClassifierModel,
    InputMode,
    build_classifier,
    model_features,
    predict,
    raw_features,
    train_classifier,
)
from .config import load_settings
from .data import (
    DEFAULT_HORIZON_YEARS,
    FeatureSchema,
    TabularDataset,
    apply_standardization,
    derive_labels,
    fit_standardization,
    infer_schema,
    iqr_bounds,
    load_bounds,
    load_csv,
    load_followup_csv,
    preprocess,
    split,
    write_csv,
)
from .exceptions import MieoRuntimeError, MieoValidationError
from .metrics import classification_report, format_report
from .search import (
    GridSpec,
    baseline_select,
    comparison_report,
    deferred_select,
    final_evaluate,
    load_grid,
    ranking_disagreements,
    reports_to_dict,
)
from .synth import SynthSpec, cohort_like_spec, generate

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

MANIFEST_NAME = "manifest.json"
SCHEMA_NAME = "schema.json"
THREADS_ENV = "MIEO_NUM_THREADS"


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: str | Path, data: Any) -> None:
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _write_manifest(
    path: Path,
    argv: Sequence[str],
    config: Any,
    seed: int | None,
    inputs: Sequence[str | Path | None],
    outputs: Sequence[str | Path],
) -> None:
    _write_json(
        path,
        {
            "mieo_version": __version__,
            "argv": list(argv),
            "command": argv[0] if argv else None,
            "config": config,
            "seed": seed,
            "inputs": {str(p): _digest(p) for p in inputs if p is not None},
            "outputs": [str(p) for p in outputs],
        },
    )
    logger.info("Wrote manifest %s", path)


def _beside(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def _schema_for(
    data: str | Path, schema: str | None
) -> tuple[FeatureSchema, Path | None]:
    """Explicit schema file, else ``schema.json`` next to the data, else inferred."""
    if schema is not None:
        return FeatureSchema.load(schema), Path(schema)
    sidecar = Path(data).with_name(SCHEMA_NAME)
    if sidecar.is_file():
        return FeatureSchema.load(sidecar), sidecar
    logger.info("No schema given for %s; inferring column kinds", data)
    return infer_schema(data), None


def _settings(path: str | None) -> dict[str, Any]:
    return {} if path is None else load_settings(path)


def _labelled(ds: TabularDataset, name: str) -> TabularDataset:
    labelled = ds.labelled()
    if len(labelled) < len(ds):
        logger.warning(
            "Ignoring %d unlabelled rows of %s", len(ds) - len(labelled), name
        )
    return labelled


def cmd_synth_gen(args, argv) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.spec is not None:
        spec = SynthSpec.load(args.spec)
    else:
        spec = cohort_like_spec(n_rows=args.n_rows, seed=args.seed)
    ground_truth, masked = generate(spec, args.seed)

    outputs = [
        out / "masked.csv",
        out / "ground_truth.csv",
        out / "spec.json",
        out / SCHEMA_NAME,
    ]
    write_csv(masked, outputs[0])
    write_csv(ground_truth, outputs[1])
    spec.save(outputs[2])
    spec.schema.save(outputs[3])
    _write_manifest(
        out / MANIFEST_NAME, argv, spec.to_dict(), args.seed, [args.spec], outputs
    )


def cmd_split(args, argv) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema, schema_path = _schema_for(args.data, args.schema)
    ds = load_csv(args.data, schema)
    if args.followup is not None:
        labels = derive_labels(load_followup_csv(args.followup), args.horizon)
        if labels.shape[0] != len(ds):
            raise MieoValidationError(
                f"{args.followup} has {labels.shape[0]} records for {len(ds)} rows."
            )
        ds = ds.with_labels(labels)
    if args.bounds is not None:
        ds = preprocess(ds, load_bounds(args.bounds))

    splits = split(ds, args.seed)
    parts = {
        "train": splits.train,
        "validation": splits.validation,
        "test": splits.test,
        "unlabelled": splits.unlabelled,
    }
    if args.iqr_factor is not None:
        fences = iqr_bounds(splits.train, args.iqr_factor)
        parts = {name: preprocess(part, fences) for name, part in parts.items()}

    outputs = []
    for name, part in parts.items():
        outputs.append(out / f"{name}.csv")
        write_csv(part, outputs[-1])
    outputs.append(out / SCHEMA_NAME)
    schema.save(outputs[-1])
    config = {"horizon": args.horizon, "iqr_factor": args.iqr_factor}
    inputs = [args.data, schema_path, args.followup, args.bounds]
    _write_manifest(out / MANIFEST_NAME, argv, config, args.seed, inputs, outputs)


MIEO_FLAGS = {
    "embedding_dim": int,
    "w_bin": float,
    "w_cont": float,
    "aug_mask_prob": float,
    "lr": float,
    "epochs": int,
    "batch_size": int,
}

CLF_FLAGS = {
    "pos_weight": str,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "decision_threshold": float,
}


def _overrides(args, flags) -> dict[str, Any]:
    overrides = {name: getattr(args, name) for name in flags}
    overrides["seed"] = args.seed
    return overrides


def cmd_train_mieo(args, argv) -> None:
    schema, schema_path = _schema_for(args.data, args.schema)
    config = MieoConfig.from_settings(
        _settings(args.config), _overrides(args, MIEO_FLAGS)
    )
    train = load_csv(args.data, schema)
    stats = fit_standardization(train)
    parts = [apply_standardization(stats, train)]
    if args.unlabelled is not None:
        parts.append(apply_standardization(stats, load_csv(args.unlabelled, schema)))
    validation = None
    if args.validation is not None:
        validation = apply_standardization(stats, load_csv(args.validation, schema))

    model = build_mieo(config, schema, standardization=stats)
    model, history = train_mieo(model, TabularDataset.concat(parts), validation, config)
    model.save(args.out)
    outputs = [args.out]
    if args.history is not None:
        _write_json(args.history, [entry.to_dict() for entry in history])
        outputs.append(args.history)
    inputs = [args.data, schema_path, args.unlabelled, args.validation, args.config]
    _write_manifest(
        _beside(args.out), argv, config.to_dict(), config.seed, inputs, outputs
    )


def cmd_train_clf(args, argv) -> None:
    config = ClassifierConfig.from_settings(
        _settings(args.config), _overrides(args, CLF_FLAGS)
    )
    mode = InputMode(args.mode)

    mieo = None
    if mode is InputMode.EMBEDDING:
        if args.mieo_model is None:
            raise MieoValidationError("--mode embedding needs --mieo-model.")
        mieo = MieoModel.load(args.mieo_model)
        schema, schema_path = mieo.schema, None
    else:
        schema, schema_path = _schema_for(args.data, args.schema)
    train = _labelled(load_csv(args.data, schema), args.data)
    validation = None
    if args.validation is not None:
        validation = _labelled(load_csv(args.validation, schema), args.validation)

    if mode is InputMode.EMBEDDING:
        model = build_classifier(config, mieo.embedding_dim, mode)
    else:
        stats = fit_standardization(train)
        model = build_classifier(
            config, 2 * schema.n_features, mode, schema=schema, standardization=stats
        )

    def features(ds):
        return model_features(model, ds, mieo)

    val_x = None if validation is None else features(validation)
    val_y = None if validation is None else validation.labels
    train_classifier(model, features(train), train.labels, val_x, val_y, config)
    model.save(args.out)
    outputs = [args.out]
    inputs = [args.data, schema_path, args.validation, args.mieo_model, args.config]
    resolved = config.to_dict() | {
        "mode": mode.value,
        "resolved_pos_weight": model.pos_weight,
    }
    _write_manifest(_beside(args.out), argv, resolved, config.seed, inputs, outputs)


def cmd_encode(args, argv) -> None:
    mieo = MieoModel.load(args.mieo_model)
    ds = load_csv(args.data, mieo.schema)
    embedding = encode(mieo, ds)
    columns = [f"z{k:03d}" for k in range(embedding.shape[1])]
    frame = pd.DataFrame(embedding, columns=columns)
    frame["label"] = pd.array(np.where(ds.is_labelled, ds.labels, None), dtype="Int8")
    frame.to_csv(args.out, index=False, encoding="utf-8")
    inputs = [args.mieo_model, args.data]
    _write_manifest(_beside(args.out), argv, None, None, inputs, [args.out])


def cmd_impute(args, argv) -> None:
    mieo = MieoModel.load(args.mieo_model)
    ds = load_csv(args.data, mieo.schema)
    completed = ds.with_values(impute(mieo, ds).hard_values)
    write_csv(completed, args.out)
    inputs = [args.mieo_model, args.data]
    _write_manifest(_beside(args.out), argv, None, None, inputs, [args.out])


def cmd_evaluate(args, argv) -> None:
    classifier = ClassifierModel.load(args.clf)
    mieo = None if args.mieo_model is None else MieoModel.load(args.mieo_model)
    if classifier.input_mode is InputMode.EMBEDDING:
        if mieo is None:
            raise MieoValidationError(
                "This classifier reads embeddings; pass --mieo-model."
            )
        schema = mieo.schema
    elif classifier.schema is not None:
        schema = classifier.schema
    else:
        schema = _schema_for(args.data, args.schema)[0]
    ds = _labelled(load_csv(args.data, schema), args.data)

    if classifier.input_mode is InputMode.RAW and classifier.schema is None:
        features = raw_features(ds.values)
    else:
        features = model_features(classifier, ds, mieo)
    report = classification_report(predict(classifier, features).labels, ds.labels)
    _write_json(args.report, report.to_dict())
    print(format_report(report, title=str(args.data)))
    inputs = [args.clf, args.mieo_model, args.data]
    _write_manifest(_beside(args.report), argv, None, None, inputs, [args.report])


def _n_jobs(value: int | None) -> int:
    if value is not None:
        return value
    return int(os.environ.get(THREADS_ENV, "1"))


def _grid_dict(grid):
    return grid.to_dict() if isinstance(grid, GridSpec) else [dict(c) for c in grid]


def cmd_grid_search(args, argv) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema, schema_path = _schema_for(args.data, args.schema)
    parts = [load_csv(args.data, schema)]
    if args.unlabelled is not None:
        parts.append(load_csv(args.unlabelled, schema))
    splits = split(TabularDataset.concat(parts), args.seed)
    mieo_grid, clf_grid = load_grid(args.mieo_grid), load_grid(args.clf_grid)

    result = deferred_select(
        mieo_grid,
        clf_grid,
        splits.for_selection(),
        args.seed,
        max_trials=args.max_trials,
        n_jobs=_n_jobs(args.n_jobs),
    )
    columns = [
        (
            "MIEO+ANN",
            result.validation_report,
            final_evaluate(result.classifier, splits.test, result.mieo),
        )
    ]
    trials = result.trials
    if args.baseline:
        baseline = baseline_select(
            clf_grid, splits.for_selection(), args.seed, max_trials=args.max_trials
        )
        columns.append(
            (
                "ANN",
                baseline.validation_report,
                final_evaluate(baseline.classifier, splits.test),
            )
        )
        trials = trials + baseline.trials

    outputs = [
        out / "trials.json",
        out / "trial_times.json",
        out / "best_mieo.model",
        out / "best_clf.model",
        out / "report.json",
        out / "report.txt",
    ]
    _write_json(outputs[0], [t.to_dict() for t in trials])
    _write_json(outputs[1], [t.wall_time for t in trials])
    result.mieo.save(outputs[2])
    result.classifier.save(outputs[3])
    report = reports_to_dict(columns) | {
        "best_trial": result.best.index,
        "ranking_disagreements": ranking_disagreements(result.trials),
    }
    _write_json(outputs[4], report)
    text = comparison_report(columns)
    outputs[5].write_text(text + "\n", encoding="utf-8")
    print(text)

    config = {
        "mieo_grid": _grid_dict(mieo_grid),
        "clf_grid": _grid_dict(clf_grid),
        "max_trials": args.max_trials,
        "baseline": args.baseline,
    }
    inputs = [args.data, args.unlabelled, schema_path, args.mieo_grid, args.clf_grid]
    _write_manifest(out / MANIFEST_NAME, argv, config, args.seed, inputs, outputs)


def cmd_replay(args, argv) -> None:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    recorded = manifest.get("argv")
    if not recorded or recorded[0] == "replay":
        raise MieoValidationError(
            f"{args.manifest} does not record a replayable command."
        )
    for path, digest in manifest.get("inputs", {}).items():
        if Path(path).is_file() and _digest(path) != digest:
            logger.warning("Input %s changed since the recorded run", path)
    logger.info("Replaying: mieo %s", " ".join(recorded))
    run(recorded)


def _add_schema(parser) -> None:
    parser.add_argument(
        "--schema",
        help="schema JSON file (default: schema.json beside the data, else inferred)",
    )


def _add_seed(parser, default=None) -> None:
    parser.add_argument("--seed", type=int, default=default, help="random seed")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="mieo",
        description="Masked-input autoencoder for tabular data with missing values.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="more logging (repeatable)"
    )
    commands = parser.add_subparsers(
        dest="command", metavar="command", parser_class=ArgumentParser
    )
    commands.required = True

    p = commands.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument(
        "--spec", help="generator parameters JSON (default: a clinical-like cohort)"
    )
    p.add_argument("--n-rows", type=int, default=8000)
    _add_seed(p, 0)
    p.set_defaults(handler=cmd_synth_gen)

    p = commands.add_parser("split", help="stratified train/validation/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--followup", help="follow-up CSV to derive labels from")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_YEARS)
    p.add_argument("--bounds", help="outlier bounds JSON, applied before splitting")
    p.add_argument(
        "--iqr-factor", type=float, help="null cells beyond IQR fences fitted on train"
    )
    _add_schema(p)
    _add_seed(p, 0)
    p.set_defaults(handler=cmd_split)

    p = commands.add_parser("train-mieo", help="train a MIEO autoencoder")
    p.add_argument("--data", required=True, help="training CSV; labels are ignored")
    p.add_argument("--unlabelled", help="extra rows for self-supervised training")
    p.add_argument("--validation", help="validation CSV for the loss history")
    p.add_argument("--config", help="settings file (JSON or YAML)")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write the per-epoch losses to this JSON file")
    for name, kind in MIEO_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)
    _add_schema(p)
    _add_seed(p)
    p.set_defaults(handler=cmd_train_mieo)

    p = commands.add_parser("train-clf", help="train the downstream classifier")
    p.add_argument("--mode", required=True, choices=[m.value for m in InputMode])
    p.add_argument("--data", required=True)
    p.add_argument("--validation")
    p.add_argument("--mieo-model")
    p.add_argument("--config", help="settings file (JSON or YAML)")
    p.add_argument("--out", required=True)
    for name, kind in CLF_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)
    _add_schema(p)
    _add_seed(p)
    p.set_defaults(handler=cmd_train_clf)

    p = commands.add_parser("encode", help="write MIEO embeddings of a CSV")
    p.add_argument("--mieo-model", "--model", dest="mieo_model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_encode)

    p = commands.add_parser("impute", help="fill missing cells with a MIEO model")
    p.add_argument("--mieo-model", "--model", dest="mieo_model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_impute)

    p = commands.add_parser("evaluate", help="classification report of a classifier")
    p.add_argument("--clf", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mieo-model")
    p.add_argument("--report", required=True)
    _add_schema(p)
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("grid-search", help="deferred-selection grid search")
    p.add_argument("--data", required=True, help="labelled (and unlabelled) rows")
    p.add_argument("--unlabelled", help="extra unlabelled rows")
    p.add_argument("--mieo-grid", required=True)
    p.add_argument("--clf-grid", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-trials", type=int)
    p.add_argument(
        "--n-jobs", type=int, help=f"parallel encoders (default: ${THREADS_ENV} or 1)"
    )
    p.add_argument(
        "--baseline", action="store_true", help="also search classifiers on raw rows"
    )
    _add_schema(p)
    _add_seed(p, 0)
    p.set_defaults(handler=cmd_grid_search)

    p = commands.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=cmd_replay)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbosity, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str]) -> None:
    """Parse ``argv`` and run the command; errors propagate."""
    args = build_parser().parse_args(list(argv))
    _configure_logging(args.verbose)
    # Manifests record the command line without the global flags.
    command_argv = list(argv)[list(argv).index(args.command) :]
    args.handler(args, command_argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        run(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_USAGE
    except (MieoValidationError, FileNotFoundError) as err:
        print(f"mieo: error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except MieoRuntimeError as err:
        print(f"mieo: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0
