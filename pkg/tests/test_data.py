"""CSV loading, preprocessing, splitting and batching."""

import numpy as np
import pytest

from dofen.data import (
    ColumnSchema,
    DataError,
    TableDataset,
    batches,
    fit_transform,
    load_csv,
    split,
)

from conftest import regression_frame


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


BINARY_SCHEMA = [
    ColumnSchema("x1", "numerical"),
    ColumnSchema("y", "categorical", "target"),
]


def test_load_csv_two_rows(tmp_path):
    path = _write(tmp_path, "x1,y\n1.5,a\n-2.0,b\n")
    ds = load_csv(path, BINARY_SCHEMA, "classification")
    assert ds.n_rows == 2
    assert len(ds.feature_columns) == 1
    assert np.allclose(ds.x_num[:, 0], [1.5, -2.0])
    assert list(ds.y) == ["a", "b"]


def test_load_csv_reports_bad_cell_with_row_and_column(tmp_path):
    path = _write(tmp_path, "x1,y\nabc,a\n2.0,b\n")
    with pytest.raises(DataError, match=r"row 2, column 'x1'"):
        load_csv(path, BINARY_SCHEMA, "classification")


def test_load_csv_rejects_empty_numeric_cell(tmp_path):
    path = _write(tmp_path, "x1,y\n1.0,a\n,b\n")
    with pytest.raises(DataError, match=r"row 3, column 'x1'"):
        load_csv(path, BINARY_SCHEMA, "classification")


def test_load_csv_missing_column(tmp_path):
    path = _write(tmp_path, "x2,y\n1.0,a\n")
    with pytest.raises(DataError, match="missing column 'x1'"):
        load_csv(path, BINARY_SCHEMA, "classification")


def test_load_csv_empty_file(tmp_path):
    path = _write(tmp_path, "")
    with pytest.raises(DataError, match="empty"):
        load_csv(path, BINARY_SCHEMA, "classification")


def test_load_csv_missing_file():
    with pytest.raises(DataError, match="cannot open"):
        load_csv("/nonexistent/file.csv", BINARY_SCHEMA, "classification")


def test_all_categorical_file_gets_dense_codes_from_one(tmp_path):
    schema = [
        ColumnSchema("cap", "categorical"),
        ColumnSchema("odor", "categorical"),
        ColumnSchema("y", "categorical", "target"),
    ]
    path = _write(tmp_path, "cap,odor,y\nx,a,e\nb,n,p\nx,n,e\nf,a,p\n")
    ds = load_csv(path, schema, "classification")
    assert all(c.kind == "categorical" for c in ds.feature_columns)
    pre, (enc,) = fit_transform(ds)
    for name in ("cap", "odor"):
        codes = sorted(pre.cat_vocab[name].values())
        assert codes == list(range(1, len(codes) + 1))
    assert enc.x_cat.min() >= 1  # every training value was seen at fit time


def test_quoted_fields_are_parsed(tmp_path):
    schema = [
        ColumnSchema("note", "categorical"),
        ColumnSchema("y", "numerical", "target"),
    ]
    path = _write(tmp_path, 'note,y\n"with, comma",1.0\n"say ""hi""",2.0\n')
    ds = load_csv(path, schema, "regression")
    assert list(ds.x_cat[:, 0]) == ["with, comma", 'say "hi"']


def test_target_optional_for_prediction_files(tmp_path):
    path = _write(tmp_path, "x1\n1.0\n2.0\n")
    ds = load_csv(path, BINARY_SCHEMA, "classification", require_target=False)
    assert ds.y is None and ds.n_rows == 2


# ---------------------------------------------------------------------------
# fit_transform
# ---------------------------------------------------------------------------

def _numeric_ds(values, task="regression", y=None):
    schema = [ColumnSchema("x1", "numerical"), ColumnSchema("y", "numerical", "target")]
    values = np.asarray(values, dtype=np.float64)
    y = values.copy() if y is None else np.asarray(y, dtype=np.float64)
    return TableDataset(
        schema=schema, task=task,
        x_num=values.reshape(-1, 1), x_cat=np.zeros((len(values), 0), dtype=object), y=y,
    )


def test_two_point_zscore():
    pre, (enc,) = fit_transform(_numeric_ds([0.0, 2.0]))
    assert np.allclose(enc.x_num[:, 0], [-1.0, 1.0])


def test_unseen_category_maps_to_zero():
    schema = [ColumnSchema("c", "categorical"), ColumnSchema("y", "numerical", "target")]

    def cat_ds(values):
        return TableDataset(
            schema=schema, task="regression",
            x_num=np.zeros((len(values), 0)),
            x_cat=np.asarray(values, dtype=object).reshape(-1, 1),
            y=np.arange(len(values), dtype=np.float64),
        )

    pre, (train, test) = fit_transform(cat_ds(["a", "b", "a"]), [cat_ds(["b", "zzz"])])
    assert test.x_cat[1, 0] == 0
    assert test.x_cat[0, 0] == pre.cat_vocab["c"]["b"]


def test_numerical_roundtrip_within_tolerance():
    rng = np.random.default_rng(0)
    raw = rng.normal(3.0, 7.0, size=50)
    pre, (enc,) = fit_transform(_numeric_ds(raw))
    back = pre.inverse_transform_numerical(enc.x_num)
    assert np.abs(back[:, 0] - raw).max() < 1e-6


def test_zero_variance_column_transforms_to_zeros():
    pre, (enc,) = fit_transform(_numeric_ds([4.0, 4.0, 4.0]))
    assert np.allclose(enc.x_num, 0.0)


def test_regression_target_standardized_and_invertible():
    raw = np.array([10.0, 20.0, 30.0])
    pre, (enc,) = fit_transform(_numeric_ds(raw))
    assert enc.y.mean() == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(pre.destandardize_target(enc.y), raw)


def test_transform_is_deterministic():
    frame = regression_frame(40, seed=5)
    pre, (a,) = fit_transform(frame)
    b = pre.transform(frame)
    assert np.array_equal(a.x_num, b.x_num) and np.array_equal(a.y, b.y)


def test_unseen_label_is_an_error():
    train = _numeric_ds([1.0, 2.0])
    schema = [ColumnSchema("x1", "numerical"), ColumnSchema("y", "categorical", "target")]
    train = TableDataset(schema=schema, task="classification", x_num=train.x_num,
                         x_cat=np.zeros((2, 0), dtype=object),
                         y=np.asarray(["a", "b"], dtype=object))
    test = TableDataset(schema=schema, task="classification", x_num=train.x_num,
                        x_cat=np.zeros((2, 0), dtype=object),
                        y=np.asarray(["a", "c"], dtype=object))
    with pytest.raises(DataError, match="label 'c'"):
        fit_transform(train, [test])


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def test_split_sizes_exact():
    frame = regression_frame(100, seed=1)
    parts = split(frame, (0.7, 0.15, 0.15), seed=0)
    assert [p.n_rows for p in parts] == [70, 15, 15]


def test_split_deterministic():
    frame = regression_frame(60, seed=2)
    a = split(frame, (0.5, 0.5), seed=9)
    b = split(frame, (0.5, 0.5), seed=9)
    for da, db in zip(a, b):
        assert np.array_equal(da.x_num, db.x_num)


def test_split_disjoint_and_exhaustive():
    frame = regression_frame(97, seed=3)
    parts = split(frame, (0.6, 0.2, 0.2), seed=4)
    seen = np.concatenate([p.x_num[:, 0] for p in parts])
    assert len(seen) == 97
    assert set(np.round(seen, 12)) == set(np.round(frame.x_num[:, 0], 12))


def test_stratified_split_keeps_class_ratio():
    rng = np.random.default_rng(7)
    n = 100
    schema = [ColumnSchema("x1", "numerical"), ColumnSchema("y", "categorical", "target")]
    labels = np.array(["a"] * 50 + ["b"] * 50, dtype=object)
    frame = TableDataset(schema=schema, task="classification",
                         x_num=rng.normal(size=(n, 1)),
                         x_cat=np.zeros((n, 0), dtype=object), y=labels)
    for part in split(frame, (0.7, 0.15, 0.15), seed=0):
        ratio = (part.y == "a").mean()
        assert abs(ratio - 0.5) <= 0.05


def test_tiny_class_falls_back_with_warning():
    schema = [ColumnSchema("x1", "numerical"), ColumnSchema("y", "categorical", "target")]
    labels = np.array(["a"] * 10 + ["b"] * 2, dtype=object)
    frame = TableDataset(schema=schema, task="classification",
                         x_num=np.zeros((12, 1)),
                         x_cat=np.zeros((12, 0), dtype=object), y=labels)
    with pytest.warns(UserWarning, match="fewer than 3"):
        parts = split(frame, (0.5, 0.5), seed=0)
    assert sum(p.n_rows for p in parts) == 12


def test_split_rejects_excess_fractions():
    with pytest.raises(DataError, match="sum"):
        split(regression_frame(10, seed=0), (0.8, 0.3), seed=0)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def test_batches_cover_with_short_tail():
    frame = regression_frame(10, seed=4)
    sizes = [len(y) for _, _, y in batches(frame, 4, seed=0, epoch=0)]
    assert sizes == [4, 4, 2]


def test_batches_preserve_order_without_shuffle():
    frame = regression_frame(8, seed=5)
    xs = np.concatenate([xn[:, 0] for xn, _, _ in batches(frame, 3, shuffle=False)])
    assert np.array_equal(xs, frame.x_num[:, 0])


def test_batches_partition_each_epoch():
    frame = regression_frame(23, seed=6)
    for epoch in range(3):
        xs = np.concatenate([xn[:, 0] for xn, _, _ in batches(frame, 5, seed=1, epoch=epoch)])
        assert len(xs) == 23
        assert set(np.round(xs, 12)) == set(np.round(frame.x_num[:, 0], 12))


def test_batches_deterministic_per_epoch():
    frame = regression_frame(16, seed=7)
    a = [xn.copy() for xn, _, _ in batches(frame, 4, seed=3, epoch=2)]
    b = [xn.copy() for xn, _, _ in batches(frame, 4, seed=3, epoch=2)]
    c = [xn.copy() for xn, _, _ in batches(frame, 4, seed=3, epoch=3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))
