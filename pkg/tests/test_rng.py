"""Determinism and stream-independence of the named random streams."""

import numpy as np

from dofen.rng import RngStream


def test_same_seed_and_name_reproduce():
    a = RngStream(42, "init").normal(size=100)
    b = RngStream(42, "init").normal(size=100)
    assert np.array_equal(a, b)


def test_different_names_are_independent():
    a = RngStream(42, "init").normal(size=100)
    b = RngStream(42, "permutation").normal(size=100)
    assert not np.array_equal(a, b)


def test_different_seeds_differ():
    a = RngStream(1, "init").normal(size=100)
    b = RngStream(2, "init").normal(size=100)
    assert not np.array_equal(a, b)


def test_child_streams_are_stable_and_distinct():
    root = RngStream(7)
    first = root.child("init").child("weights").uniform(-1, 1, 50)
    again = RngStream(7).child("init").child("weights").uniform(-1, 1, 50)
    other = RngStream(7).child("init").child("bias").uniform(-1, 1, 50)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


def test_consuming_one_stream_does_not_shift_another():
    root = RngStream(3)
    a = root.child("dropout")
    a.random(1000)  # burn draws
    b = root.child("forest-plan").permutation(20)
    fresh = RngStream(3).child("forest-plan").permutation(20)
    assert np.array_equal(b, fresh)


def test_sample_without_replacement_distinct():
    draw = RngStream(0, "plan").sample_without_replacement(10, 10)
    assert sorted(draw.tolist()) == list(range(10))
    partial = RngStream(0, "plan").sample_without_replacement(100, 30)
    assert len(set(partial.tolist())) == 30
