"""CSV loading, column typing, preprocessing, splitting and batching.

Datasets are immutable after construction. Numerical features are z-scored
with training-split statistics; categorical features get dense integer codes
fit on the training split, with code 0 reserved for values unseen there.
Regression targets are z-scored as well, and the statistics are kept so
predictions can be mapped back to the original scale. There is no
missing-value imputation: unparsable or empty cells are errors.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
CLASSIFICATION = "classification"
REGRESSION = "regression"


class DataError(ValueError):
    """Malformed input data or schema."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # "numerical" | "categorical"
    role: str = "feature"  # "feature" | "target"

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ("feature", "target"):
            raise DataError(f"column {self.name!r}: unknown role {self.role!r}")


def validate_schema(schema: list[ColumnSchema], require_target: bool = True) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise DataError("duplicate column names in schema")
    targets = [c for c in schema if c.role == "target"]
    features = [c for c in schema if c.role == "feature"]
    if require_target and len(targets) != 1:
        raise DataError(f"schema must have exactly one target column, got {len(targets)}")
    if not require_target and len(targets) > 1:
        raise DataError(f"schema must have at most one target column, got {len(targets)}")
    if not features:
        raise DataError("schema must have at least one feature column")


@dataclass
class TableDataset:
    """Column-typed tabular data.

    ``x_num`` holds the numerical feature columns (schema order) and
    ``x_cat`` the categorical ones. Before preprocessing, categorical values
    (and classification targets) are raw strings; after, they are integer
    codes. ``y`` is None for feature-only files.
    """

    schema: list[ColumnSchema]
    task: str
    x_num: np.ndarray  # [N, n_numerical] float64
    x_cat: np.ndarray  # [N, n_categorical] object (raw) or int64 (encoded)
    y: np.ndarray | None
    encoded: bool = False
    n_classes: int | None = None

    def __post_init__(self):
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise DataError(f"unknown task {self.task!r}")

    @property
    def n_rows(self) -> int:
        return self.x_num.shape[0] if self.numerical_columns else self.x_cat.shape[0]

    @property
    def feature_columns(self) -> list[ColumnSchema]:
        return [c for c in self.schema if c.role == "feature"]

    @property
    def numerical_columns(self) -> list[str]:
        return [c.name for c in self.feature_columns if c.kind == NUMERICAL]

    @property
    def categorical_columns(self) -> list[str]:
        return [c.name for c in self.feature_columns if c.kind == CATEGORICAL]

    @property
    def target_column(self) -> ColumnSchema | None:
        for c in self.schema:
            if c.role == "target":
                return c
        return None

    def subset(self, indices: np.ndarray) -> "TableDataset":
        return TableDataset(
            schema=self.schema,
            task=self.task,
            x_num=self.x_num[indices],
            x_cat=self.x_cat[indices],
            y=None if self.y is None else self.y[indices],
            encoded=self.encoded,
            n_classes=self.n_classes,
        )


def load_csv(path: str, schema: list[ColumnSchema], task: str, require_target: bool = True) -> TableDataset:
    """Load a UTF-8 comma-separated file with a header row into a typed dataset.

    Row numbers in error messages are 1-based file lines (the header is
    line 1). Extra file columns are ignored; schema columns must all be
    present, except that the target may be absent when ``require_target``
    is False.
    """
    validate_schema(schema, require_target=require_target)
    try:
        handle = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open csv file {path!r}: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"csv file {path!r} is empty") from None
        position = {name: i for i, name in enumerate(header)}

        target = next((c for c in schema if c.role == "target"), None)
        has_target = target is not None and target.name in position
        if require_target and target is not None and not has_target:
            raise DataError(f"missing column {target.name!r} in {path!r}")
        active = [c for c in schema if c.role == "feature" or (c.role == "target" and has_target)]
        for col in active:
            if col.name not in position:
                raise DataError(f"missing column {col.name!r} in {path!r}")

        num_cols = [c for c in active if c.role == "feature" and c.kind == NUMERICAL]
        cat_cols = [c for c in active if c.role == "feature" and c.kind == CATEGORICAL]

        num_rows: list[list[float]] = []
        cat_rows: list[list[str]] = []
        y_raw: list = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise DataError(f"row {line_no}: expected {len(header)} cells, got {len(row)}")
            num_rows.append([_parse_number(row[position[c.name]], line_no, c.name) for c in num_cols])
            cat_rows.append([_parse_category(row[position[c.name]], line_no, c.name) for c in cat_cols])
            if has_target:
                cell = row[position[target.name]]
                if task == REGRESSION:
                    y_raw.append(_parse_number(cell, line_no, target.name))
                else:
                    y_raw.append(_parse_category(cell, line_no, target.name))

    n = len(num_rows)
    x_num = np.asarray(num_rows, dtype=np.float64).reshape(n, len(num_cols))
    x_cat = np.asarray(cat_rows, dtype=object).reshape(n, len(cat_cols))
    y = None
    if has_target:
        y = np.asarray(y_raw, dtype=np.float64 if task == REGRESSION else object)
    return TableDataset(schema=list(schema), task=task, x_num=x_num, x_cat=x_cat, y=y)


def _parse_number(cell: str, line_no: int, column: str) -> float:
    text = cell.strip()
    if not text:
        raise DataError(f"row {line_no}, column {column!r}: empty cell in numerical column")
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"row {line_no}, column {column!r}: cannot parse {cell!r} as a number"
        ) from None
    if not np.isfinite(value):
        raise DataError(f"row {line_no}, column {column!r}: non-finite value {cell!r}")
    return value


def _parse_category(cell: str, line_no: int, column: str) -> str:
    if not cell.strip():
        raise DataError(f"row {line_no}, column {column!r}: empty cell")
    return cell


UNKNOWN_CODE = 0


@dataclass
class Preprocessor:
    """Fitted, deterministic feature/target transform.

    Numerical columns: z-score with training statistics (a zero-variance
    column transforms to all zeros). Categorical columns: dense codes from 1
    in sorted category order, 0 for values unseen at fit time. Regression
    targets are z-scored; classification labels get dense codes from 0.
    """

    numerical_columns: list[str]
    categorical_columns: list[str]
    num_mean: np.ndarray
    num_std: np.ndarray
    cat_vocab: dict[str, dict[str, int]]
    task: str
    target_mean: float = 0.0
    target_std: float = 1.0
    label_vocab: dict[str, int] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.label_vocab)

    def cardinality(self, column: str) -> int:
        # +1 for the reserved unknown code 0
        return len(self.cat_vocab[column]) + 1

    @property
    def label_names(self) -> list[str]:
        return [name for name, _ in sorted(self.label_vocab.items(), key=lambda kv: kv[1])]

    def transform(self, ds: TableDataset) -> TableDataset:
        x_num = self.transform_numerical(ds.x_num)
        x_cat, _ = self.encode_categorical(ds.x_cat)
        y = None
        if ds.y is not None:
            if self.task == REGRESSION:
                y = self.standardize_target(ds.y.astype(np.float64))
            else:
                y = self.encode_labels(ds.y)
        return TableDataset(
            schema=ds.schema,
            task=ds.task,
            x_num=x_num,
            x_cat=x_cat,
            y=y,
            encoded=True,
            n_classes=self.n_classes if self.task == CLASSIFICATION else None,
        )

    def transform_numerical(self, x_num: np.ndarray) -> np.ndarray:
        safe = np.where(self.num_std > 0, self.num_std, 1.0)
        z = (x_num - self.num_mean) / safe
        return np.where(self.num_std > 0, z, 0.0)

    def inverse_transform_numerical(self, z: np.ndarray) -> np.ndarray:
        return z * self.num_std + self.num_mean

    def encode_categorical(self, x_cat: np.ndarray) -> tuple[np.ndarray, int]:
        """Map raw category strings to codes; returns (codes, unseen count)."""
        codes = np.zeros(x_cat.shape, dtype=np.int64)
        unseen = 0
        for j, name in enumerate(self.categorical_columns):
            vocab = self.cat_vocab[name]
            for i in range(x_cat.shape[0]):
                code = vocab.get(x_cat[i, j], UNKNOWN_CODE)
                if code == UNKNOWN_CODE:
                    unseen += 1
                codes[i, j] = code
        return codes, unseen

    def standardize_target(self, y: np.ndarray) -> np.ndarray:
        if self.target_std > 0:
            return (y - self.target_mean) / self.target_std
        return np.zeros_like(y)

    def destandardize_target(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_std + self.target_mean

    def encode_labels(self, y: np.ndarray) -> np.ndarray:
        out = np.empty(len(y), dtype=np.int64)
        for i, value in enumerate(y):
            if value not in self.label_vocab:
                raise DataError(f"label {value!r} was not present in the training split")
            out[i] = self.label_vocab[value]
        return out


def fit_transform(
    train: TableDataset, others: list[TableDataset] | None = None
) -> tuple[Preprocessor, list[TableDataset]]:
    """Fit a Preprocessor on the training split and transform every dataset.

    Returns (preprocessor, [train_transformed, *others_transformed]).
    """
    if train.n_rows == 0:
        raise DataError("training split is empty")
    others = list(others or [])

    num_cols = train.numerical_columns
    cat_cols = train.categorical_columns
    mean = train.x_num.mean(axis=0) if num_cols else np.zeros(0)
    std = train.x_num.std(axis=0) if num_cols else np.zeros(0)

    vocab: dict[str, dict[str, int]] = {}
    for j, name in enumerate(cat_cols):
        seen = sorted(set(train.x_cat[:, j]))
        vocab[name] = {value: code for code, value in enumerate(seen, start=1)}

    target_mean, target_std = 0.0, 1.0
    label_vocab: dict[str, int] = {}
    if train.y is not None:
        if train.task == REGRESSION:
            target_mean = float(train.y.mean())
            target_std = float(train.y.std())
        else:
            label_vocab = {value: code for code, value in enumerate(sorted(set(train.y)))}

    pre = Preprocessor(
        numerical_columns=num_cols,
        categorical_columns=cat_cols,
        num_mean=np.asarray(mean, dtype=np.float64),
        num_std=np.asarray(std, dtype=np.float64),
        cat_vocab=vocab,
        task=train.task,
        target_mean=target_mean,
        target_std=target_std,
        label_vocab=label_vocab,
    )
    return pre, [pre.transform(ds) for ds in [train] + others]


def split(
    dataset: TableDataset, fractions: tuple[float, ...], seed: int
) -> list[TableDataset]:
    """Disjoint, seed-deterministic row partition into len(fractions) parts.

    Classification splits are stratified per class when every class has at
    least 3 rows; otherwise a warning is emitted and the split is plain.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions):
        raise DataError(f"split fractions must be positive, got {fractions}")
    if sum(fractions) > 1.0 + 1e-9:
        raise DataError(f"split fractions sum to {sum(fractions):.4f} > 1")

    n = dataset.n_rows
    rng = RngStream(seed, "split")

    stratify = dataset.task == CLASSIFICATION and dataset.y is not None
    if stratify:
        _, counts = np.unique(dataset.y.astype(str), return_counts=True)
        if counts.min() < 3:
            warnings.warn(
                "some class has fewer than 3 rows; falling back to an unstratified split",
                stacklevel=2,
            )
            stratify = False

    if stratify:
        parts: list[list[np.ndarray]] = [[] for _ in fractions]
        labels = dataset.y.astype(str)
        for value in sorted(set(labels)):
            members = np.flatnonzero(labels == value)
            members = members[rng.child(f"class/{value}").permutation(len(members))]
            for k, chunk in enumerate(_cut(members, fractions)):
                parts[k].append(chunk)
        index_sets = [np.sort(np.concatenate(p)) for p in parts]
    else:
        order = rng.permutation(n)
        index_sets = [np.sort(chunk) for chunk in _cut(order, fractions)]
    return [dataset.subset(idx) for idx in index_sets]


def _cut(indices: np.ndarray, fractions: tuple[float, ...]) -> list[np.ndarray]:
    n = len(indices)
    bounds = [0]
    cumulative = 0.0
    for f in fractions:
        cumulative += f
        bounds.append(int(np.floor(cumulative * n + 0.5)))
    return [indices[bounds[i] : bounds[i + 1]] for i in range(len(fractions))]


def batches(
    dataset: TableDataset,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
):
    """Yield (x_num, x_cat, y) covering every row exactly once.

    The shuffle order is a deterministic function of (seed, epoch); the last
    batch may be short.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset.n_rows
    if shuffle:
        order = RngStream(seed, f"shuffle/epoch{epoch}").permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield (
            dataset.x_num[idx],
            dataset.x_cat[idx],
            None if dataset.y is None else dataset.y[idx],
        )
