"""Checkpoint file format.

Layout::

    b"TOMFCKPT"                      8-byte magic
    header length                    uint64, little-endian
    header                           UTF-8 JSON
    payload                          float64 little-endian tensors, directory order

The header holds ``format_version``, the model ``config``, an optional
``meta`` object (epoch, optimizer settings) and ``tensors``: a list of
``{"name", "shape", "offset"}`` records with byte offsets into the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from tomformer.errors import CheckpointError, CheckpointShapeError
from tomformer.model import ModelConfig, ModelParams, parameter_shapes
from tomformer.tensor import Tensor

MAGIC = b"TOMFCKPT"
FORMAT_VERSION = 1


def save_checkpoint(
    path: str | os.PathLike,
    params: ModelParams,
    config: ModelConfig,
    meta: dict | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write params (and optional extra arrays such as optimizer state)."""
    arrays = [(name, t.data) for name, t in params.items()]
    arrays += [(name, np.asarray(a, dtype=np.float64)) for name, a in (extra or {}).items()]
    directory, offset = [], 0
    for name, data in arrays:
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += data.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "num_params": len(params),
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, data in arrays:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse header and every stored array, validating the directory."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    directory = header.get("tensors")
    if not isinstance(directory, list) or header.get("num_params", -1) > len(directory):
        raise CheckpointError(f"{path}: tensor directory inconsistent with header counts")
    payload = memoryview(raw)[16 + hlen :]
    arrays, expected_offset = {}, 0
    for entry in directory:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed directory entry {entry!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset != expected_offset or offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: directory entry {name!r} points outside the payload")
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - expected_offset} unaccounted bytes")
    return header, arrays


def load_checkpoint(
    path: str | os.PathLike, expected_config: ModelConfig | None = None
) -> tuple[ModelParams, ModelConfig]:
    header, arrays = read_checkpoint(path)
    stored = ModelConfig.from_dict(header["config"])
    config = expected_config or stored
    tensors = {}
    for name, shape in parameter_shapes(config):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, config expects {shape}"
            )
        tensors[name] = Tensor(arrays[name].copy(), requires_grad=True)
    if len(tensors) != header["num_params"]:
        raise CheckpointError(f"{path}: stores {header['num_params']} parameter tensors, config has {len(tensors)}")
    return ModelParams(tensors), config
