"""The forest-ensemble model.

Forward pass stages:
  1. Condition generation: each column independently produces
     ``conditions_per_column`` soft scores (an affine map of the scalar for
     numerical columns, an embedding row for categorical codes).
  2. Tree construction: the condition matrix is rearranged by a permutation
     frozen at build time and reshaped into ``n_trees`` rows of depth
     ``tree_depth``; each row is one soft tree.
  3. Tree scoring: a per-tree grouped stack (norm -> linear -> ReLU ->
     dropout -> linear) turns each tree's conditions into per-head weights.
  4. Two-level ensemble: each of ``n_forests`` forests holds a frozen sample
     of trees drawn without replacement; its embedding is the softmax-weighted
     sum of member embedding rows, a shared predictor head maps it to an
     output, and the final prediction averages the forests.

All randomness (init, permutation, forest sampling, dropout) comes from
named streams derived from the config seed, so two builds with the same seed
are bit-identical and inference is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DerivedShapes, DofenConfig, derive_shapes
from .data import CATEGORICAL, CLASSIFICATION, NUMERICAL, REGRESSION, ColumnSchema, Preprocessor, TableDataset
from .rng import RngStream

# Variance floor used by every normalization layer.
NORM_EPS = 1e-5


@dataclass(frozen=True)
class TableSpec:
    """Everything the model needs to know about the table it was built for."""

    columns: tuple[ColumnSchema, ...]  # full schema, target included
    cardinalities: dict[str, int]      # categorical feature -> code count (incl unknown 0)
    task: str
    n_classes: int | None = None

    @property
    def feature_columns(self) -> list[ColumnSchema]:
        return [c for c in self.columns if c.role == "feature"]

    @property
    def n_columns(self) -> int:
        return len(self.feature_columns)

    @property
    def numerical_names(self) -> list[str]:
        return [c.name for c in self.feature_columns if c.kind == NUMERICAL]

    @property
    def categorical_names(self) -> list[str]:
        return [c.name for c in self.feature_columns if c.kind == CATEGORICAL]

    @property
    def out_dim(self) -> int:
        if self.task == CLASSIFICATION:
            if not self.n_classes or self.n_classes < 2:
                raise ValueError(f"classification needs >= 2 classes, got {self.n_classes}")
            return self.n_classes
        return 1

    @staticmethod
    def from_data(dataset: TableDataset, preprocessor: Preprocessor) -> "TableSpec":
        cards = {name: preprocessor.cardinality(name) for name in dataset.categorical_columns}
        return TableSpec(
            columns=tuple(dataset.schema),
            cardinalities=cards,
            task=dataset.task,
            n_classes=preprocessor.n_classes if dataset.task == CLASSIFICATION else None,
        )


class DofenModel:
    """Parameters plus the frozen permutation and forest sampling plan."""

    def __init__(self, config: DofenConfig, table: TableSpec, shapes: DerivedShapes):
        self.config = config
        self.table = table
        self.shapes = shapes
        self._params: dict[str, Tensor] = {}
        self.permutation: np.ndarray | None = None      # conditions -> tree slots
        self.forest_plan: np.ndarray | None = None      # [n_forests, trees_per_forest]
        self.forest_plan_mask: np.ndarray | None = None  # False = pruned out
        self.dropout_rng = RngStream(config.seed, "dropout")
        # Positions of schema feature columns inside the (numeric block,
        # categorical block) concatenation used by the condition generator.
        numeric = self.table.numerical_names
        categorical = self.table.categorical_names
        block_pos = {name: i for i, name in enumerate(numeric)}
        block_pos.update({name: len(numeric) + i for i, name in enumerate(categorical)})
        self._column_order = np.asarray(
            [block_pos[c.name] for c in self.table.feature_columns], dtype=np.int64
        )

    # -- parameter registry -------------------------------------------------

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def clone(self) -> "DofenModel":
        """Deep copy; the clone shares nothing mutable with the original."""
        other = DofenModel(self.config, self.table, self.shapes)
        for name, p in self._params.items():
            other.add_param(name, p.data.copy())
        other.permutation = self.permutation.copy()
        other.forest_plan = self.forest_plan.copy()
        other.forest_plan_mask = self.forest_plan_mask.copy()
        return other

    def redraw_forest_plan(self, epoch: int) -> None:
        """Experimental per-epoch resampling; keeps the mask shape intact."""
        stream = RngStream(self.config.seed, f"forest-plan/epoch{epoch}")
        self.forest_plan = _draw_forest_plan(self.config, self.shapes, stream)
        self.forest_plan_mask = np.ones_like(self.forest_plan, dtype=bool)


def _draw_forest_plan(config: DofenConfig, shapes: DerivedShapes, stream: RngStream) -> np.ndarray:
    if config.no_forest_ensemble:
        return np.arange(shapes.n_trees, dtype=np.int64)[None, :]
    rows = [
        stream.sample_without_replacement(shapes.n_trees, shapes.trees_per_forest)
        for _ in range(config.n_forests)
    ]
    return np.asarray(rows, dtype=np.int64)


def build_model(config: DofenConfig, table: TableSpec) -> DofenModel:
    """Initialize parameters, permutation and sampling plan from config.seed."""
    shapes = derive_shapes(config, table.n_columns)
    model = DofenModel(config, table, shapes)
    root = RngStream(config.seed)
    init = root.child("init")

    def affine(name: str, shape: tuple, fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        model.add_param(name, init.child(name).uniform(-bound, bound, shape))

    def embedding(name: str, rows: int, dim: int) -> None:
        model.add_param(name, init.child(name).normal(0.0, 1.0, (rows, dim)) / np.sqrt(dim))

    C = shapes.conditions_per_column
    T = shapes.n_trees
    d = config.tree_depth
    H = config.hidden_dim
    out_dim = table.out_dim

    n_num = len(table.numerical_names)
    if n_num:
        affine("conditions/numerical/weight", (n_num, 1, C), fan_in=1)
        affine("conditions/numerical/bias", (n_num, C), fan_in=1)
    for name in table.categorical_names:
        embedding(f"conditions/categorical/{name}", table.cardinalities[name], C)

    model.add_param("scorer/norm_gain", np.ones((T, d)))
    model.add_param("scorer/norm_shift", np.zeros((T, d)))
    affine("scorer/lin1_weight", (T, d, d), fan_in=d)
    affine("scorer/lin1_bias", (T, d), fan_in=d)
    affine("scorer/lin2_weight", (T, d, config.n_heads), fan_in=d)
    affine("scorer/lin2_bias", (T, config.n_heads), fan_in=d)

    embedding("tree_embeddings", T, H)

    model.add_param("predictor/norm_gain", np.ones(H))
    model.add_param("predictor/norm_shift", np.zeros(H))
    affine("predictor/lin1_weight", (H, H), fan_in=H)
    affine("predictor/lin1_bias", (H,), fan_in=H)
    affine("predictor/lin2_weight", (H, out_dim), fan_in=H)
    affine("predictor/lin2_bias", (out_dim,), fan_in=H)

    if config.no_condition_shuffle:
        model.permutation = np.arange(C * table.n_columns, dtype=np.int64)
    else:
        model.permutation = root.child("permutation").permutation(C * table.n_columns).astype(np.int64)

    model.forest_plan = _draw_forest_plan(config, shapes, root.child("forest-plan"))
    model.forest_plan_mask = np.ones_like(model.forest_plan, dtype=bool)
    return model


def model_from_parts(
    config: DofenConfig,
    table: TableSpec,
    params: dict[str, np.ndarray],
    permutation: np.ndarray,
    forest_plan: np.ndarray,
    forest_plan_mask: np.ndarray,
) -> DofenModel:
    """Rebuild a model from stored arrays (checkpoint loading)."""
    shapes = derive_shapes(config, table.n_columns)
    reference = build_model(config, table)
    model = DofenModel(config, table, shapes)
    expected = dict(reference.parameters())
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, ref in reference.parameters():
        arr = params[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"parameter {name}: stored shape {arr.shape} != expected {ref.shape}")
        model.add_param(name, arr)
    model.permutation = np.asarray(permutation, dtype=np.int64)
    model.forest_plan = np.asarray(forest_plan, dtype=np.int64)
    model.forest_plan_mask = np.asarray(forest_plan_mask, dtype=bool)
    return model


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def generate_conditions(model: DofenModel, x_num: np.ndarray, x_cat: np.ndarray) -> Tensor:
    """Per-column soft conditions: [B, conditions_per_column, n_columns].

    Column j's slice depends only on feature j.
    """
    table = model.table
    n_num = len(table.numerical_names)
    n_cat = len(table.categorical_names)
    B = x_num.shape[0] if n_num else x_cat.shape[0]
    if n_num and x_num.shape[1] != n_num:
        raise ValueError(f"expected {n_num} numerical columns, got {x_num.shape[1]}")
    if x_cat.shape[1] != n_cat:
        raise ValueError(f"expected {n_cat} categorical columns, got {x_cat.shape[1]}")
    C = model.shapes.conditions_per_column

    blocks: list[Tensor] = []
    if n_num:
        x = Tensor(np.asarray(x_num, dtype=np.float64).reshape(B, n_num, 1))
        blocks.append(
            ad.grouped_linear(
                x, model.param("conditions/numerical/weight"), model.param("conditions/numerical/bias")
            )
        )
    for j, name in enumerate(table.categorical_names):
        rows = ad.embedding_lookup(model.param(f"conditions/categorical/{name}"), x_cat[:, j])
        blocks.append(ad.reshape(rows, (B, 1, C)))

    combined = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=1)  # [B, n_col, C]
    ordered = ad.take(combined, model._column_order, axis=1)
    return ad.transpose(ordered, (0, 2, 1))


def conditions_to_trees(model: DofenModel, conditions: Tensor) -> Tensor:
    """Rearrange the condition matrix by the frozen permutation into trees.

    [B, C, n_col] -> [B, n_trees, depth]; pure gather, no arithmetic. Flat
    slot i of the output takes flat entry permutation[i] of the row-major
    condition matrix.
    """
    B, C, n_col = conditions.shape
    T, d = model.shapes.n_trees, model.config.tree_depth
    if C * n_col != T * d:
        raise ValueError(f"cannot reshape {C}x{n_col} conditions into {T} trees of depth {d}")
    flat = ad.reshape(conditions, (B, C * n_col))
    shuffled = ad.take(flat, model.permutation, axis=1)
    return ad.reshape(shuffled, (B, T, d))


def score_trees(model: DofenModel, trees: Tensor, training: bool) -> Tensor:
    """Per-tree weights [B, n_trees, n_heads]; tree j sees only its own row."""
    h = ad.group_layer_norm(
        trees, model.param("scorer/norm_gain"), model.param("scorer/norm_shift"), NORM_EPS
    )
    h = ad.grouped_linear(h, model.param("scorer/lin1_weight"), model.param("scorer/lin1_bias"))
    h = ad.relu(h)
    h = ad.dropout(h, model.config.dropout_rate, training, model.dropout_rng)
    return ad.grouped_linear(h, model.param("scorer/lin2_weight"), model.param("scorer/lin2_bias"))


def _predictor_head(model: DofenModel, flat: Tensor, training: bool) -> Tensor:
    h = ad.layer_norm(
        flat, model.param("predictor/norm_gain"), model.param("predictor/norm_shift"), NORM_EPS
    )
    h = ad.linear(h, model.param("predictor/lin1_weight"), model.param("predictor/lin1_bias"))
    h = ad.relu(h)
    h = ad.dropout(h, model.config.dropout_rate, training, model.dropout_rng)
    return ad.linear(h, model.param("predictor/lin2_weight"), model.param("predictor/lin2_bias"))


def forest_forward(model: DofenModel, weights: Tensor, training: bool) -> tuple[Tensor, Tensor]:
    """Two-level ensemble (multi-head general form).

    Returns (mean prediction [B, out_dim], per-forest predictions
    [n_forests, B, out_dim]). Each forest gathers its frozen sample of tree
    weights and embedding rows, softmaxes the weights per head over forest
    members, pools the per-head embedding chunks, and runs the shared
    predictor head; the mean averages the forests.
    """
    plan, mask = model.forest_plan, model.forest_plan_mask
    R, E = plan.shape
    B = weights.shape[0]
    NH = model.config.n_heads
    H = model.config.hidden_dim
    K = H // NH
    out_dim = model.table.out_dim
    flat_idx = plan.reshape(-1)

    w = ad.take(weights, flat_idx, axis=1)            # [B, R*E, NH]
    w = ad.reshape(w, (B, R, E, NH))
    w = ad.transpose(w, (0, 1, 3, 2))                 # [B, R, NH, E]
    if not mask.all():
        w = ad.masked_fill(w, mask[None, :, None, :], -np.inf)
    scores = ad.softmax(w)                            # [B, R, NH, E]

    rows = ad.take(model.param("tree_embeddings"), flat_idx, axis=0)  # [R*E, H]
    table = ad.reshape(rows, (R, E, NH, K))
    pooled = ad.weighted_pool(scores, table)          # [B, R, NH, K]
    embeddings = ad.reshape(pooled, (B, R, H))

    flat = ad.reshape(embeddings, (B * R, H))
    outputs = _predictor_head(model, flat, training)  # [B*R, out_dim]
    per_sample = ad.reshape(outputs, (B, R, out_dim))
    mean = ad.mean_axis(per_sample, axis=1)           # [B, out_dim]
    per_forest = ad.transpose(per_sample, (1, 0, 2))  # [R, B, out_dim]
    return mean, per_forest


def forest_forward_single_head(model: DofenModel, weights: Tensor, training: bool) -> tuple[Tensor, Tensor]:
    """Head-free ensemble path; requires n_heads == 1.

    Same computation order as :func:`forest_forward` with its singleton head
    axis removed, so the two are bit-identical at one head.
    """
    if model.config.n_heads != 1:
        raise ValueError(f"single-head path requires n_heads == 1, got {model.config.n_heads}")
    plan, mask = model.forest_plan, model.forest_plan_mask
    R, E = plan.shape
    B = weights.shape[0]
    H = model.config.hidden_dim
    out_dim = model.table.out_dim
    flat_idx = plan.reshape(-1)

    w = ad.reshape(weights, (B, weights.shape[1]))    # drop the head axis
    w = ad.take(w, flat_idx, axis=1)                  # [B, R*E]
    w = ad.reshape(w, (B, R, E))
    if not mask.all():
        w = ad.masked_fill(w, mask[None, :, :], -np.inf)
    scores = ad.softmax(w)                            # [B, R, E]

    rows = ad.take(model.param("tree_embeddings"), flat_idx, axis=0)  # [R*E, H]
    table = ad.reshape(rows, (R, E, H))
    embeddings = ad.weighted_pool_single(scores, table)  # [B, R, H]

    flat = ad.reshape(embeddings, (B * R, H))
    outputs = _predictor_head(model, flat, training)
    per_sample = ad.reshape(outputs, (B, R, out_dim))
    mean = ad.mean_axis(per_sample, axis=1)
    per_forest = ad.transpose(per_sample, (1, 0, 2))
    return mean, per_forest


def forward(model: DofenModel, x_num: np.ndarray, x_cat: np.ndarray, training: bool) -> tuple[Tensor, Tensor]:
    """Full forward pass; returns (mean prediction, per-forest predictions)."""
    conditions = generate_conditions(model, x_num, x_cat)
    trees = conditions_to_trees(model, conditions)
    weights = score_trees(model, trees, training)
    return forest_forward(model, weights, training)


def forward_loss(
    model: DofenModel,
    x_num: np.ndarray,
    x_cat: np.ndarray,
    y: np.ndarray,
    training: bool,
) -> tuple[Tensor, Tensor]:
    """Mean prediction and the training loss.

    The loss sums the per-forest losses (each mean-reduced over the batch):
    cross-entropy on per-forest logits for classification, squared error on
    per-forest outputs for regression.
    """
    mean, per_forest = forward(model, x_num, x_cat, training)
    R, B, out_dim = per_forest.shape
    if model.table.task == CLASSIFICATION:
        flat = ad.reshape(per_forest, (R * B, out_dim))
        labels = np.tile(np.asarray(y, dtype=np.int64), R)
        loss = ad.scale(ad.cross_entropy(flat, labels), float(R))
    else:
        flat = ad.reshape(per_forest, (R * B,))
        targets = np.tile(np.asarray(y, dtype=np.float64), R)
        loss = ad.scale(ad.mse(flat, targets), float(R))
    return mean, loss


@dataclass
class PredictOutput:
    """Per-row predictions on the original target scale."""

    probabilities: np.ndarray | None = None  # [B, n_classes]
    label_codes: np.ndarray | None = None    # [B] argmax (lowest index wins ties)
    values: np.ndarray | None = None         # [B] de-standardized regression outputs


def predict(
    model: DofenModel,
    preprocessor: Preprocessor,
    x_num: np.ndarray,
    x_cat: np.ndarray,
) -> PredictOutput:
    """Deterministic inference on already-encoded features."""
    mean, per_forest = forward(model, x_num, x_cat, training=False)
    if model.table.task == CLASSIFICATION:
        if model.config.probability_average:
            probs = ad.softmax(per_forest).data.mean(axis=0)
        else:
            probs = ad.softmax(mean).data
        labels = probs.argmax(axis=1) if probs.shape[0] else np.zeros(0, dtype=np.int64)
        return PredictOutput(probabilities=probs, label_codes=labels)
    values = preprocessor.destandardize_target(mean.data[:, 0].astype(np.float64))
    return PredictOutput(values=values)


def predict_dataset(
    model: DofenModel,
    preprocessor: Preprocessor,
    dataset: TableDataset,
    chunk: int = 256,
) -> PredictOutput:
    """Chunked :func:`predict` over a whole (encoded) dataset."""
    probs, labels, values = [], [], []
    n = dataset.n_rows
    for start in range(0, n, chunk):
        part = predict(
            model,
            preprocessor,
            dataset.x_num[start : start + chunk],
            dataset.x_cat[start : start + chunk],
        )
        if part.probabilities is not None:
            probs.append(part.probabilities)
            labels.append(part.label_codes)
        else:
            values.append(part.values)
    if model.table.task == CLASSIFICATION:
        empty = np.zeros((0, model.table.out_dim))
        return PredictOutput(
            probabilities=np.concatenate(probs) if probs else empty,
            label_codes=np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
        )
    return PredictOutput(values=np.concatenate(values) if values else np.zeros(0))
