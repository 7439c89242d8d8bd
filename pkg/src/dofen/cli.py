"""Command-line entry point: train, evaluate, predict, importance, prune, inspect.

Every command is deterministic given identical inputs and seeds. Failures
exit nonzero with a single machine-parsable line on stderr
(``error: <kind>: <message>``); success is silent except requested reports.
The DOFEN_PRECISION environment variable (f32 | f64) selects scalar
precision before the process starts computing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, DofenConfig
from .data import (
    CLASSIFICATION,
    REGRESSION,
    ColumnSchema,
    DataError,
    TableDataset,
    fit_transform,
    load_csv,
    split,
)
from .interpret import PRUNE_ENDS, importance_table, prune, weight_profile
from .model import TableSpec, build_model, predict_dataset
from .training import TrainConfig, TrainingError, evaluate, train


class CliError(ValueError):
    """Bad command usage or invalid run configuration."""


def _fail_kind(exc: Exception) -> str:
    return {
        DataError: "data",
        ConfigError: "config",
        CheckpointError: "checkpoint",
        TrainingError: "training",
        CliError: "usage",
    }.get(type(exc), "runtime")


# ---------------------------------------------------------------------------
# Run configuration file
# ---------------------------------------------------------------------------

def _load_run_config(path: str, seed_override: int | None) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config file {path!r}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path!r} is not valid JSON: {exc}") from exc

    for section in ("data",):
        if section not in raw:
            raise CliError(f"config file is missing the {section!r} section")
    data = raw["data"]
    for key in ("csv", "task", "columns"):
        if key not in data:
            raise CliError(f"data section is missing {key!r}")
    if data["task"] not in (CLASSIFICATION, REGRESSION):
        raise CliError(f"task must be classification or regression, got {data['task']!r}")

    try:
        schema = [ColumnSchema(**c) for c in data["columns"]]
    except (TypeError, DataError) as exc:
        raise CliError(f"bad column schema: {exc}") from exc

    model_cfg = DofenConfig(**raw.get("model", {}))
    train_cfg = TrainConfig(**raw.get("train", {}))
    if seed_override is not None:
        data["seed"] = seed_override
        model_cfg.seed = seed_override
        train_cfg.seed = seed_override
    model_cfg.validate()
    train_cfg.validate()

    fractions = tuple(data.get("split_fractions", (0.7, 0.15, 0.15)))
    if not 1 <= len(fractions) <= 3:
        raise CliError(f"split_fractions must have 1..3 entries, got {len(fractions)}")
    return {
        "csv": data["csv"],
        "task": data["task"],
        "schema": schema,
        "fractions": fractions,
        "data_seed": int(data.get("seed", 0)),
        "model": model_cfg,
        "train": train_cfg,
        "output_dir": raw.get("output_dir", "."),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _load_run_config(args.config, args.seed_override)
    dataset = load_csv(run["csv"], run["schema"], run["task"])
    parts = split(dataset, run["fractions"], run["data_seed"])
    train_raw, others_raw = parts[0], parts[1:]
    preprocessor, encoded = fit_transform(train_raw, others_raw)
    train_ds, rest = encoded[0], encoded[1:]
    val_ds = rest[0] if len(rest) >= 1 and rest[0].n_rows else None
    test_ds = rest[1] if len(rest) >= 2 and rest[1].n_rows else None

    table = TableSpec.from_data(train_ds, preprocessor)
    model = build_model(run["model"], table)

    out_dir = Path(run["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = train(model, preprocessor, train_ds, val_ds, run["train"], out_dir=out_dir)

    metrics = {
        "epochs": run["train"].epochs,
        "effective_batch_size": report.effective_batch_size,
        "wall_clock_sec": report.wall_clock_sec,
        "splits": {},
    }
    for name, ds in (("train", train_ds), ("val", val_ds), ("test", test_ds)):
        if ds is not None and ds.n_rows:
            metrics["splits"][name] = evaluate(model, ds, preprocessor).to_dict()
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def _load_for_checkpoint(path: str, checkpoint_table: TableSpec, require_target: bool) -> TableDataset:
    schema = list(checkpoint_table.columns)
    return load_csv(path, schema, checkpoint_table.task, require_target=require_target)


def cmd_evaluate(args) -> int:
    model, preprocessor = load_checkpoint(args.checkpoint)
    raw = _load_for_checkpoint(args.data, model.table, require_target=True)
    dataset = preprocessor.transform(raw)
    result = evaluate(model, dataset, preprocessor)
    if args.out:
        Path(args.out).write_text(
            json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if result.constant_target:
        print(f"error: evaluate: constant-target ({result.metric_name} undefined)", file=sys.stderr)
        return 1
    print(f"{result.metric_name} {result.value:.6f}")
    return 0


def cmd_predict(args) -> int:
    model, preprocessor = load_checkpoint(args.checkpoint)
    raw = _load_for_checkpoint(args.data, model.table, require_target=False)
    x_num = preprocessor.transform_numerical(raw.x_num)
    x_cat, unseen = preprocessor.encode_categorical(raw.x_cat)
    if unseen:
        print(
            f"warning: {unseen} unseen categorical values mapped to the unknown code",
            file=sys.stderr,
        )
    encoded = TableDataset(
        schema=raw.schema, task=raw.task, x_num=x_num, x_cat=x_cat, y=None, encoded=True,
        n_classes=model.table.n_classes,
    )
    out = predict_dataset(model, preprocessor, encoded)

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if model.table.task == CLASSIFICATION:
            names = preprocessor.label_names
            writer.writerow(["label"] + [f"p_{n}" for n in names])
            for i in range(len(out.label_codes)):
                row = [names[out.label_codes[i]]] + [f"{p:.8g}" for p in out.probabilities[i]]
                writer.writerow(row)
        else:
            writer.writerow(["prediction"])
            for value in out.values:
                writer.writerow([f"{value:.8g}"])
    return 0


def cmd_importance(args) -> int:
    model, preprocessor = load_checkpoint(args.checkpoint)
    raw = _load_for_checkpoint(args.data, model.table, require_target=False)
    dataset = preprocessor.transform(raw)
    if dataset.n_rows == 0:
        raise DataError("importance needs at least one data row")
    rows = importance_table(model, dataset)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", "importance"])
        for name, value in rows:
            writer.writerow([name, f"{value:.10g}"])
    return 0


def cmd_prune(args) -> int:
    if args.end not in PRUNE_ENDS:
        raise CliError(f"--end must be one of {PRUNE_ENDS}, got {args.end!r}")
    model, preprocessor = load_checkpoint(args.checkpoint)
    raw = _load_for_checkpoint(args.data, model.table, require_target=False)
    dataset = preprocessor.transform(raw)
    if dataset.n_rows == 0:
        raise DataError("pruning needs at least one data row to profile weights")
    profile = weight_profile(model, dataset)
    pruned = prune(model, profile, args.ratio, args.end)
    save_checkpoint(args.out, pruned, preprocessor)
    return 0


def cmd_inspect(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    shapes = model.shapes
    surviving = int(model.forest_plan_mask.sum())
    print(f"task = {model.table.task}")
    print(f"n_columns = {shapes.n_columns}")
    print(f"conditions_per_column = {shapes.conditions_per_column}")
    print(f"n_trees = {shapes.n_trees}")
    print(f"trees_per_forest = {shapes.trees_per_forest}")
    print(f"n_forests = {model.forest_plan.shape[0]}")
    print(f"forest_slots_active = {surviving}/{model.forest_plan_mask.size}")
    print(f"parameters = {model.parameter_count()}")
    print(f"checksum = sha256:{digest}")
    print(f"config = {json.dumps(asdict(model.config), sort_keys=True, default=list)}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dofen",
        description="Tabular learning with forests of relaxed oblivious decision trees.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run configuration")
    p.add_argument("--config", required=True, help="path to the run configuration JSON")
    p.add_argument("--seed-override", type=int, default=None, help="override every seed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a labelled csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("predict", help="write per-row predictions for a csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("importance", help="write per-column feature importance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_importance)

    p = sub.add_parser("prune", help="drop trees from one end of the weight profile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--end", default="low_std", choices=PRUNE_ENDS)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_prune)

    p = sub.add_parser("inspect", help="print config, derived shapes and checksum")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (DataError, ConfigError, CheckpointError, TrainingError, CliError, ValueError) as exc:
        print(f"error: {_fail_kind(exc)}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
