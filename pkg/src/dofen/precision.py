"""Scalar precision selection.

All tensor math runs in a single process-wide float precision: 32-bit by
default (fast training), 64-bit for gradient verification. The initial
value comes from the DOFEN_PRECISION environment variable.
"""

import os
from contextlib import contextmanager

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_active_name = os.environ.get("DOFEN_PRECISION", "f32")
if _active_name not in _DTYPES:
    raise RuntimeError(
        f"DOFEN_PRECISION must be one of {sorted(_DTYPES)}, got {_active_name!r}"
    )


def precision_name() -> str:
    return _active_name


def active_dtype() -> type:
    """The numpy scalar type new tensors are created with."""
    return _DTYPES[_active_name]


def set_precision(name: str) -> None:
    global _active_name
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _active_name = name


@contextmanager
def precision(name: str):
    """Temporarily switch precision, e.g. ``with precision("f64"): ...``."""
    previous = _active_name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)
