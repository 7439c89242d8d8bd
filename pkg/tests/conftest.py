"""Shared fixtures and synthetic-data builders."""

from __future__ import annotations

import numpy as np
import pytest

from dofen.config import DofenConfig
from dofen.data import ColumnSchema, TableDataset
from dofen.model import TableSpec
from dofen.precision import precision


@pytest.fixture
def f64():
    """Run a test in 64-bit precision (gradient oracles need it)."""
    with precision("f64"):
        yield


def toy_table(n_num: int = 2, cat_cards: tuple = (4,), task: str = "classification",
              n_classes: int | None = 2) -> TableSpec:
    columns = [ColumnSchema(f"x{i + 1}", "numerical") for i in range(n_num)]
    columns += [ColumnSchema(f"c{i + 1}", "categorical") for i in range(len(cat_cards))]
    target_kind = "categorical" if task == "classification" else "numerical"
    columns.append(ColumnSchema("y", target_kind, "target"))
    cards = {f"c{i + 1}": card for i, card in enumerate(cat_cards)}
    return TableSpec(
        columns=tuple(columns),
        cardinalities=cards,
        task=task,
        n_classes=n_classes if task == "classification" else None,
    )


def toy_config(**overrides) -> DofenConfig:
    base = dict(tree_depth=2, trees_per_column=2, n_heads=1, n_forests=2, hidden_dim=8, seed=0)
    base.update(overrides)
    return DofenConfig(**base)


def random_inputs(table: TableSpec, batch: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x_num = rng.normal(size=(batch, len(table.numerical_names)))
    cards = [table.cardinalities[c] for c in table.categorical_names]
    x_cat = np.column_stack(
        [rng.integers(1, card, size=batch) for card in cards]
    ) if cards else np.zeros((batch, 0), dtype=np.int64)
    if table.task == "classification":
        y = rng.integers(0, table.n_classes, size=batch)
    else:
        y = rng.normal(size=batch)
    return x_num, x_cat, y


def regression_frame(n: int, seed: int, noise: float = 0.1) -> TableDataset:
    """y = 2*x1 - x2 + noise, with x3 pure noise."""
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, 3))
    y = 2.0 * xs[:, 0] - xs[:, 1] + noise * rng.normal(size=n)
    schema = [
        ColumnSchema("x1", "numerical"),
        ColumnSchema("x2", "numerical"),
        ColumnSchema("x3", "numerical"),
        ColumnSchema("y", "numerical", "target"),
    ]
    return TableDataset(
        schema=schema, task="regression",
        x_num=xs, x_cat=np.zeros((n, 0), dtype=object), y=y,
    )


def classification_frame(n: int, seed: int) -> TableDataset:
    """Separable two-class data over 2 numerical + 1 categorical feature."""
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, 2))
    cats = rng.choice(["red", "green"], size=n)
    score = xs[:, 0] + 2.0 * xs[:, 1] + np.where(cats == "red", 1.0, -1.0)
    labels = np.where(score > 0, "pos", "neg").astype(object)
    schema = [
        ColumnSchema("x1", "numerical"),
        ColumnSchema("x2", "numerical"),
        ColumnSchema("color", "categorical"),
        ColumnSchema("y", "categorical", "target"),
    ]
    return TableDataset(
        schema=schema, task="classification",
        x_num=xs, x_cat=cats.astype(object).reshape(-1, 1), y=labels,
    )


def informative_feature_frame(n: int, seed: int) -> TableDataset:
    """Regression where only the first of four features carries signal."""
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, 4))
    y = 3.0 * xs[:, 0] + 0.05 * rng.normal(size=n)
    schema = [ColumnSchema(f"x{i + 1}", "numerical") for i in range(4)]
    schema.append(ColumnSchema("y", "numerical", "target"))
    return TableDataset(
        schema=schema, task="regression",
        x_num=xs, x_cat=np.zeros((n, 0), dtype=object), y=y,
    )


def write_dataset_csv(path, dataset: TableDataset) -> None:
    import csv as _csv

    feature_names = [c.name for c in dataset.feature_columns]
    target = dataset.target_column
    header = feature_names + ([target.name] if target is not None and dataset.y is not None else [])
    num_names = dataset.numerical_columns
    cat_names = dataset.categorical_columns
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n_rows):
            row = []
            for name in feature_names:
                if name in num_names:
                    row.append(repr(float(dataset.x_num[i, num_names.index(name)])))
                else:
                    row.append(str(dataset.x_cat[i, cat_names.index(name)]))
            if target is not None and dataset.y is not None:
                value = dataset.y[i]
                row.append(repr(float(value)) if dataset.task == "regression" else str(value))
            writer.writerow(row)
