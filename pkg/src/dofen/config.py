"""Model hyperparameters and the sizes derived from them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """A hyperparameter constraint was violated."""


@dataclass
class DofenConfig:
    """All model hyperparameters, ablation flags and the model seed.

    Derived sizes (see :func:`derive_shapes`):
      conditions_per_column = trees_per_column * tree_depth
      n_trees               = n_columns * trees_per_column
      trees_per_forest      = max(2, isqrt(n_columns)) * trees_per_column
    """

    tree_depth: int = 4
    trees_per_column: int = 16
    n_heads: int = 1
    n_forests: int = 100
    hidden_dim: int = 128
    dropout_rate: float = 0.0
    seed: int = 0
    no_condition_shuffle: bool = False
    no_forest_ensemble: bool = False
    # Optional override of the trees_per_forest formula (testing/ablations).
    trees_per_forest_override: int | None = None
    # Redraw the forest sampling plan at each training epoch (experimental).
    resample_forests_each_epoch: bool = False
    # Average per-forest probabilities instead of logits at predict time.
    probability_average: bool = False
    # MLP layer counts of the three sub-networks; only (1, 2, 2) is built.
    delta_layer_counts: tuple = (1, 2, 2)

    def validate(self) -> None:
        if self.tree_depth < 1:
            raise ConfigError(f"tree_depth must be >= 1, got {self.tree_depth}")
        if self.trees_per_column < 1:
            raise ConfigError(f"trees_per_column must be >= 1, got {self.trees_per_column}")
        if self.n_heads < 1:
            raise ConfigError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.n_forests < 1:
            raise ConfigError(f"n_forests must be >= 1, got {self.n_forests}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim must be divisible by n_heads: {self.hidden_dim} % {self.n_heads} != 0"
            )
        if tuple(self.delta_layer_counts) != (1, 2, 2):
            raise ConfigError(
                f"only the (1, 2, 2) sub-network composition is supported, got {self.delta_layer_counts}"
            )


@dataclass(frozen=True)
class DerivedShapes:
    n_columns: int
    conditions_per_column: int  # rows of the condition matrix
    n_trees: int                # total soft trees in the pool
    trees_per_forest: int       # sampled per forest, without replacement


def derive_shapes(config: DofenConfig, n_columns: int) -> DerivedShapes:
    """Compute the three derived sizes and check every divisibility constraint."""
    config.validate()
    if n_columns < 1:
        raise ConfigError(f"need at least one feature column, got {n_columns}")
    conditions = config.trees_per_column * config.tree_depth
    if (conditions * n_columns) % config.tree_depth != 0:
        raise ConfigError(
            "conditions_per_column * n_columns must be divisible by tree_depth: "
            f"{conditions} * {n_columns} % {config.tree_depth} != 0"
        )
    n_trees = n_columns * config.trees_per_column
    if config.trees_per_forest_override is not None:
        per_forest = config.trees_per_forest_override
    else:
        per_forest = max(2, math.isqrt(n_columns)) * conditions // config.tree_depth
    if per_forest < 1:
        raise ConfigError(f"trees_per_forest must be >= 1, got {per_forest}")
    if per_forest > n_trees:
        raise ConfigError(
            f"trees_per_forest must not exceed n_trees: {per_forest} > {n_trees}"
        )
    return DerivedShapes(
        n_columns=n_columns,
        conditions_per_column=conditions,
        n_trees=n_trees,
        trees_per_forest=per_forest,
    )
