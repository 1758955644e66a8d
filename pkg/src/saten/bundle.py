"""Tensor bundles: a JSON manifest plus one little-endian binary blob.

A bundle is a directory holding ``manifest.json`` and ``data.bin``. The
manifest lists every tensor with its dtype, shape, byte offset, byte length
and CRC-32, in blob order. Floating-point tensors are stored as float32 and
widened to float64 on load.

Saten layers are stored as a group of tensors named ``<layer>/...`` plus a
``layers`` entry in the manifest carrying the fold plan and metadata.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .layer import SatenLayer
from .shape_opt import FoldPlan
from .sparsity import (
    COORDINATE,
    ROW_LIST,
    TWO_FOUR,
    CoordinateResidual,
    RowListResidual,
    TwoFourResidual,
)
from .tt import TTRepresentation

SCHEMA = 1
MANIFEST = "manifest.json"
BLOB = "data.bin"

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4"), "uint8": np.dtype("u1")}


def _disk_dtype(array: np.ndarray) -> str:
    if array.dtype.kind == "f":
        return "float32"
    if array.dtype == np.uint8:
        return "uint8"
    if array.dtype.kind in "iu":
        return "int32"
    raise FormatError(f"unsupported dtype {array.dtype}")


@dataclass
class Bundle:
    """In-memory view of a bundle: ordered tensors plus manifest extras."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    layers: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_bundle(tensors, path, layers=None, meta=None) -> None:
    """Write ``tensors`` (name -> array, in iteration order) to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = _disk_dtype(array)
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"schema": SCHEMA, "tensors": entries}
    if layers:
        manifest["layers"] = layers
    if meta:
        manifest["meta"] = meta
    _atomic_write(path / BLOB, b"".join(chunks))
    _atomic_write(path / MANIFEST, (json.dumps(manifest, indent=1) + "\n").encode())


def _atomic_write(target: Path, data: bytes) -> None:
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, target)


def read_bundle(path, verify_checksums: bool = True) -> tuple[Bundle, dict[str, bool]]:
    """Load a bundle, returning it and a per-tensor checksum status map."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path / MANIFEST}: malformed manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("schema") != SCHEMA:
        raise FormatError(f"{path / MANIFEST}: unsupported or missing schema")
    blob = (path / BLOB).read_bytes()

    bundle = Bundle(layers=manifest.get("layers", {}), meta=manifest.get("meta", {}))
    checks = {}
    end = 0
    for entry in manifest.get("tensors", []):
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest entry {entry!r}: {exc}") from None
        if name in bundle.tensors:
            raise FormatError(f"tensor {name!r} listed twice")
        if nbytes != math.prod(shape) * dtype.itemsize:
            raise FormatError(
                f"tensor {name!r}: shape {shape} needs {math.prod(shape) * dtype.itemsize} "
                f"bytes, manifest says {nbytes}"
            )
        if offset < end:
            raise FormatError(f"tensor {name!r}: offset {offset} overlaps previous tensor")
        if offset + nbytes > len(blob):
            raise FormatError(
                f"tensor {name!r}: needs bytes {offset}..{offset + nbytes}, "
                f"blob is truncated at {len(blob)}"
            )
        raw = blob[offset:offset + nbytes]
        ok = "crc32" not in entry or zlib.crc32(raw) == entry["crc32"]
        if verify_checksums and not ok:
            raise FormatError(f"tensor {name!r}: checksum mismatch")
        checks[name] = ok
        array = np.frombuffer(raw, dtype=dtype).reshape(shape)
        if dtype.kind == "f":
            array = array.astype(np.float64)
        elif dtype == np.uint8:
            array = array.copy()
        else:
            array = array.astype(np.int64)
        bundle.tensors[name] = array
        end = offset + nbytes
    if end != len(blob):
        raise FormatError(f"blob has {len(blob) - end} trailing bytes beyond the last tensor")
    return bundle, checks


def load_bundle(path) -> dict[str, np.ndarray]:
    return read_bundle(path)[0].tensors


def pack_2bit(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.uint8).reshape(-1)
    padded = np.zeros(math.ceil(values.size / 4) * 4, dtype=np.uint8)
    padded[: values.size] = values
    quads = padded.reshape(-1, 4)
    return quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)


def unpack_2bit(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8).reshape(-1, 1)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    return ((packed >> shifts) & 3).reshape(-1)[:count].astype(np.uint8)


def layer_tensors(name: str, layer: SatenLayer) -> tuple[dict[str, np.ndarray], dict]:
    """Split a layer into named tensors plus its manifest metadata."""
    tensors = {f"{name}/core{j}": c for j, c in enumerate(layer.tt.cores)}
    res = layer.residual
    prefix = f"{name}/residual"
    if res.format == COORDINATE:
        tensors[f"{prefix}/rows"] = res.rows.astype(np.int32)
        tensors[f"{prefix}/cols"] = res.cols.astype(np.int32)
        tensors[f"{prefix}/values"] = res.values
    elif res.format == TWO_FOUR:
        index = np.concatenate([res.group_index.reshape(-1), res.tail_index.reshape(-1)])
        tensors[f"{prefix}/values"] = res.values
        tensors[f"{prefix}/index"] = pack_2bit(index)
    else:
        tensors[f"{prefix}/rows"] = res.rows.astype(np.int32)
        tensors[f"{prefix}/values"] = res.row_values
    meta = {
        "kind": "saten",
        "shape": list(layer.shape),
        "input_factors": list(layer.fold_plan.input_factors),
        "output_factors": list(layer.fold_plan.output_factors),
        "ranks": list(layer.tt.ranks),
        "epsilon": layer.epsilon,
        "pattern": layer.pattern,
        "residual_format": res.format,
        "notes": list(layer.notes),
    }
    return tensors, meta


def layer_from_tensors(name: str, meta: dict, tensors: dict[str, np.ndarray]) -> SatenLayer:
    try:
        plan = FoldPlan(meta["input_factors"], meta["output_factors"])
        n_rows, n_cols = plan.n_rows, plan.n_cols
        cores = tuple(tensors[f"{name}/core{j}"] for j in range(len(plan.mode_sizes)))
        prefix = f"{name}/residual"
        fmt = meta["residual_format"]
        if fmt == COORDINATE:
            residual = CoordinateResidual(
                n_rows, n_cols, tensors[f"{prefix}/rows"], tensors[f"{prefix}/cols"],
                tensors[f"{prefix}/values"],
            )
        elif fmt == TWO_FOUR:
            values = tensors[f"{prefix}/values"]
            index = unpack_2bit(tensors[f"{prefix}/index"], values.size)
            n_groups, rem = divmod(n_rows, 4)
            split = n_groups * 2 * n_cols
            residual = TwoFourResidual(
                n_rows, n_cols, values[:split], index[:split], values[split:], index[split:]
            )
        elif fmt == ROW_LIST:
            residual = RowListResidual(
                n_rows, n_cols, tensors[f"{prefix}/rows"], tensors[f"{prefix}/values"]
            )
        else:
            raise FormatError(f"layer {name!r}: unknown residual format {fmt!r}")
        return SatenLayer(
            plan, TTRepresentation(cores), residual, float(meta["epsilon"]),
            meta["pattern"], tuple(meta.get("notes", ())),
        )
    except KeyError as exc:
        raise FormatError(f"layer {name!r}: missing {exc}") from None
    except ValueError as exc:
        raise FormatError(f"layer {name!r}: {exc}") from None


def split_model(bundle: Bundle) -> tuple[dict[str, np.ndarray], dict[str, SatenLayer]]:
    """Separate plain tensors from Saten layers."""
    layers = {}
    owned = set()
    for name, meta in bundle.layers.items():
        prefix = f"{name}/"
        group = {k: v for k, v in bundle.tensors.items() if k.startswith(prefix)}
        layers[name] = layer_from_tensors(name, meta, group)
        owned.update(group)
    dense = {k: v for k, v in bundle.tensors.items() if k not in owned}
    return dense, layers


def load_model(path) -> tuple[dict[str, np.ndarray], dict[str, SatenLayer]]:
    return split_model(read_bundle(path)[0])


def save_model(path, entries: dict, meta=None) -> None:
    """Save a mix of plain arrays and :class:`SatenLayer` values, in order."""
    tensors = {}
    layers = {}
    for name, value in entries.items():
        if isinstance(value, SatenLayer):
            parts, layers[name] = layer_tensors(name, value)
            tensors.update(parts)
        else:
            tensors[name] = value
    save_bundle(tensors, path, layers=layers, meta=meta)
