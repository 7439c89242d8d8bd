"""Bit-exact binary checkpoints.

Layout: magic bytes ``DOFN``, format version (u32 LE), a length-prefixed
UTF-8 JSON header (config, schema, preprocessor statistics, tensor directory
with name/shape/offset), then raw tensor payloads in directory order.
Parameters are stored as little-endian 32-bit floats; the permutation and
the forest sampling plan (with its survivor mask) as little-endian unsigned
32-bit integers. Offsets are byte positions inside the payload section.

The JSON header is serialized with sorted keys and fixed separators, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .config import DofenConfig
from .data import ColumnSchema, Preprocessor
from .model import DofenModel, TableSpec, model_from_parts

MAGIC = b"DOFN"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def _config_to_dict(config: DofenConfig) -> dict:
    out = dataclasses.asdict(config)
    out["delta_layer_counts"] = list(out["delta_layer_counts"])
    return out


def _config_from_dict(raw: dict) -> DofenConfig:
    raw = dict(raw)
    raw["delta_layer_counts"] = tuple(raw.get("delta_layer_counts", (1, 2, 2)))
    return DofenConfig(**raw)


def _table_to_dict(table: TableSpec) -> dict:
    return {
        "columns": [
            {"name": c.name, "kind": c.kind, "role": c.role} for c in table.columns
        ],
        "cardinalities": dict(table.cardinalities),
        "task": table.task,
        "n_classes": table.n_classes,
    }


def _table_from_dict(raw: dict) -> TableSpec:
    return TableSpec(
        columns=tuple(ColumnSchema(**c) for c in raw["columns"]),
        cardinalities={k: int(v) for k, v in raw["cardinalities"].items()},
        task=raw["task"],
        n_classes=raw["n_classes"],
    )


def _preprocessor_to_dict(pre: Preprocessor) -> dict:
    return {
        "numerical_columns": list(pre.numerical_columns),
        "categorical_columns": list(pre.categorical_columns),
        "num_mean": pre.num_mean.tolist(),
        "num_std": pre.num_std.tolist(),
        "cat_vocab": {k: dict(v) for k, v in pre.cat_vocab.items()},
        "task": pre.task,
        "target_mean": pre.target_mean,
        "target_std": pre.target_std,
        "label_vocab": dict(pre.label_vocab),
    }


def _preprocessor_from_dict(raw: dict) -> Preprocessor:
    return Preprocessor(
        numerical_columns=list(raw["numerical_columns"]),
        categorical_columns=list(raw["categorical_columns"]),
        num_mean=np.asarray(raw["num_mean"], dtype=np.float64),
        num_std=np.asarray(raw["num_std"], dtype=np.float64),
        cat_vocab={k: {kk: int(vv) for kk, vv in v.items()} for k, v in raw["cat_vocab"].items()},
        task=raw["task"],
        target_mean=float(raw["target_mean"]),
        target_std=float(raw["target_std"]),
        label_vocab={k: int(v) for k, v in raw["label_vocab"].items()},
    )


def save_checkpoint(path: str | Path, model: DofenModel, preprocessor: Preprocessor) -> None:
    entries: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.parameters():
        entries.append((name, "f32", np.ascontiguousarray(p.data, dtype=_DTYPES["f32"])))
    entries.append(("permutation", "u32", model.permutation.astype(_DTYPES["u32"])))
    entries.append(("forest_plan", "u32", model.forest_plan.astype(_DTYPES["u32"])))
    entries.append(
        ("forest_plan_mask", "u32", model.forest_plan_mask.astype(_DTYPES["u32"]))
    )

    directory = []
    payload = bytearray()
    for name, dtype, arr in entries:
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": len(payload)}
        )
        payload.extend(arr.tobytes(order="C"))

    header = {
        "config": _config_to_dict(model.config),
        "table": _table_to_dict(model.table),
        "preprocessor": _preprocessor_to_dict(preprocessor),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[DofenModel, Preprocessor]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc.strerror}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path!r} is not a checkpoint (bad magic bytes)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<I", blob[8:12])[0]
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"{path!r} is truncated inside the header")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path!r} has a corrupt header: {exc}") from exc
    payload = blob[header_end:]

    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path!r}: tensor {entry['name']!r} exceeds payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)

    config = _config_from_dict(header["config"])
    table = _table_from_dict(header["table"])
    preprocessor = _preprocessor_from_dict(header["preprocessor"])

    for special in ("permutation", "forest_plan", "forest_plan_mask"):
        if special not in arrays:
            raise CheckpointError(f"{path!r}: missing tensor {special!r}")
    params = {
        name: arr for name, arr in arrays.items()
        if name not in ("permutation", "forest_plan", "forest_plan_mask")
    }
    try:
        model = model_from_parts(
            config,
            table,
            params,
            permutation=arrays["permutation"].astype(np.int64),
            forest_plan=arrays["forest_plan"].astype(np.int64),
            forest_plan_mask=arrays["forest_plan_mask"].astype(bool),
        )
    except ValueError as exc:
        raise CheckpointError(f"{path!r}: {exc}") from exc
    return model, preprocessor
