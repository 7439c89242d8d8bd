"""Derived-size formulas and hyperparameter validation."""

import pytest

from dofen.config import ConfigError, DofenConfig, derive_shapes


@pytest.mark.parametrize(
    "n_columns, n_trees, per_forest",
    [
        (3, 48, 32),
        (4, 64, 32),
        (6, 96, 32),
        (9, 144, 48),
        (10, 160, 48),
        (16, 256, 64),
        (26, 416, 80),
        (54, 864, 112),
        (124, 1984, 176),
        (255, 4080, 240),
        (419, 6704, 320),
    ],
)
def test_default_shape_vectors(n_columns, n_trees, per_forest):
    shapes = derive_shapes(DofenConfig(), n_columns)
    assert shapes.conditions_per_column == 64
    assert shapes.n_trees == n_trees
    assert shapes.trees_per_forest == per_forest


def test_defaults_match_documented_values():
    cfg = DofenConfig()
    assert cfg.tree_depth == 4
    assert cfg.trees_per_column == 16
    assert cfg.n_heads == 1
    assert cfg.n_forests == 100
    assert cfg.hidden_dim == 128
    assert cfg.dropout_rate == 0.0


def test_small_column_counts_use_the_floor_of_two():
    # isqrt(3) == 1 but the multiplier never drops below 2.
    shapes = derive_shapes(DofenConfig(tree_depth=2, trees_per_column=3), 3)
    assert shapes.trees_per_forest == 2 * 3


def test_head_divisibility_is_enforced():
    with pytest.raises(ConfigError, match="divisible by n_heads"):
        derive_shapes(DofenConfig(hidden_dim=10, n_heads=4), 3)


def test_single_column_violates_forest_size():
    with pytest.raises(ConfigError, match="trees_per_forest must not exceed"):
        derive_shapes(DofenConfig(), 1)


def test_override_controls_forest_size():
    shapes = derive_shapes(DofenConfig(trees_per_forest_override=48), 3)
    assert shapes.trees_per_forest == 48
    with pytest.raises(ConfigError, match="must not exceed"):
        derive_shapes(DofenConfig(trees_per_forest_override=49), 3)


def test_bad_dropout_rejected():
    with pytest.raises(ConfigError, match="dropout_rate"):
        DofenConfig(dropout_rate=1.0).validate()


def test_unsupported_layer_counts_rejected():
    with pytest.raises(ConfigError, match="composition"):
        DofenConfig(delta_layer_counts=(2, 4, 4)).validate()
