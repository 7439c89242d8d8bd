"""Feature importance, tree-weight profiling, and tree pruning.

All analyses are read-only passes over an immutable model in inference mode.
Importance of one sample is the occurrence matrix (how many of each tree's
condition slots came from each column) weighted by that sample's softmaxed
tree scores, divided by the tree depth so the entries sum to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Preprocessor, TableDataset
from .model import DofenModel, conditions_to_trees, generate_conditions, score_trees

PRUNE_ENDS = ("low_std", "high_std", "low_mean", "high_mean")


def occurrence_matrix(model: DofenModel) -> np.ndarray:
    """[n_trees, n_columns] counts of condition slots per source column.

    Inverts the frozen permutation: slot (j, k) of tree j holds the condition
    at flat position permutation[j*d + k] of the row-major condition matrix,
    whose column is that position mod n_columns. Every row sums to the depth.
    """
    n_col = model.table.n_columns
    T, d = model.shapes.n_trees, model.config.tree_depth
    source_columns = (model.permutation % n_col).reshape(T, d)
    counts = np.zeros((T, n_col), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(T), d), source_columns.ravel()), 1)
    return counts


def _softmaxed_tree_scores(
    model: DofenModel, x_num: np.ndarray, x_cat: np.ndarray
) -> np.ndarray:
    """[B, n_trees] head-averaged scores softmaxed over the whole tree pool."""
    conditions = generate_conditions(model, x_num, x_cat)
    trees = conditions_to_trees(model, conditions)
    weights = score_trees(model, trees, training=False).data  # [B, T, heads]
    w = weights.mean(axis=2)
    shifted = w - w.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def dataset_tree_scores(model: DofenModel, dataset: TableDataset, chunk: int = 256) -> np.ndarray:
    """Softmaxed tree scores for every row of a dataset: [N, n_trees]."""
    if dataset.n_rows == 0:
        raise ValueError("need at least one row")
    parts = [
        _softmaxed_tree_scores(
            model, dataset.x_num[s : s + chunk], dataset.x_cat[s : s + chunk]
        )
        for s in range(0, dataset.n_rows, chunk)
    ]
    return np.concatenate(parts, axis=0)


def sample_importance(model: DofenModel, x_num: np.ndarray, x_cat: np.ndarray) -> np.ndarray:
    """Per-column importance of one sample; non-negative, sums to 1."""
    scores = _softmaxed_tree_scores(model, x_num.reshape(1, -1), x_cat.reshape(1, -1))[0]
    counts = occurrence_matrix(model)
    return counts.T.astype(np.float64) @ scores / model.config.tree_depth


def dataset_importance(model: DofenModel, dataset: TableDataset) -> np.ndarray:
    """Mean of sample importances over all rows; still sums to 1."""
    scores = dataset_tree_scores(model, dataset)
    counts = occurrence_matrix(model)
    return counts.T.astype(np.float64) @ scores.mean(axis=0) / model.config.tree_depth


@dataclass
class WeightProfile:
    """Per-tree mean and standard deviation of softmaxed scores across rows."""

    mean: np.ndarray  # [n_trees]
    std: np.ndarray   # [n_trees], population std (ddof=0)


def weight_profile(model: DofenModel, dataset: TableDataset) -> WeightProfile:
    scores = dataset_tree_scores(model, dataset)
    return WeightProfile(mean=scores.mean(axis=0), std=scores.std(axis=0))


def prune(
    model: DofenModel,
    profile: WeightProfile,
    ratio: float,
    end: str,
) -> DofenModel:
    """Drop floor(ratio * n_trees) trees from the chosen end of the profile.

    Forest plans keep their index arrays but mask the pruned members, so the
    softmax renormalizes over survivors. Sort ties break by ascending tree
    index; ratio 0 returns an identical model.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")
    if end not in PRUNE_ENDS:
        raise ValueError(f"prune end must be one of {PRUNE_ENDS}, got {end!r}")
    T = model.shapes.n_trees
    key = profile.std if end.endswith("std") else profile.mean
    if key.shape != (T,):
        raise ValueError(f"profile length {key.shape} does not match n_trees {T}")

    k = math.floor(ratio * T)
    pruned_model = model.clone()
    if k == 0:
        return pruned_model

    ascending = np.lexsort((np.arange(T), key))
    if end.startswith("low"):
        dropped = ascending[:k]
    else:
        descending = np.lexsort((np.arange(T), -key))
        dropped = descending[:k]

    keep = np.ones(T, dtype=bool)
    keep[dropped] = False
    new_mask = pruned_model.forest_plan_mask & keep[pruned_model.forest_plan]
    empty = np.flatnonzero(~new_mask.any(axis=1))
    if empty.size:
        raise ValueError(
            f"pruning at ratio {ratio} would empty forest {int(empty[0])}; "
            "every forest must keep at least one tree"
        )
    pruned_model.forest_plan_mask = new_mask
    return pruned_model


def importance_table(
    model: DofenModel, dataset: TableDataset
) -> list[tuple[str, float]]:
    """(column name, importance) pairs in schema order."""
    values = dataset_importance(model, dataset)
    names = [c.name for c in model.table.feature_columns]
    return list(zip(names, values.tolist()))
