"""Checkpoint archive format.

A checkpoint is a ZIP archive (stored, not compressed, with a fixed entry
timestamp so identical runs produce identical bytes) holding two members:

* ``meta.json`` — model config, build seed, epoch counter, loss history and
  any extra run metadata, as sorted-key JSON.
* ``params.bin`` — every named parameter and buffer, concatenated as records:

  ========  =======================================
  u32       length of the name in bytes
  bytes     name (UTF-8), e.g. ``node_1_1.conv1.weight``
  u32       length of the dtype string
  bytes     numpy dtype string, e.g. ``<f4``
  u32       number of dimensions
  u64 * n   shape
  u64       payload size in bytes
  bytes     row-major (C-order) array data
  ========  =======================================

  All integers are little-endian. Round-tripping is bit-exact.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import LoadError
from .model import ModelConfig, SegModel

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _named_arrays(model: SegModel) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.detach().numpy()) for name, p in model.named_parameters()]
    out += [(name, b.detach().numpy()) for name, b in model.named_buffers()]
    return out


def _pack(entries: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    for name, arr in entries:
        data = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = data.dtype.str.encode("ascii")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", len(dtype_b)))
        buf.write(dtype_b)
        buf.write(struct.pack("<I", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<Q", dim))
        raw = data.tobytes(order="C")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    return buf.getvalue()


def _unpack(blob: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    view = memoryview(blob)
    pos = 0

    def take(fmt: str) -> int:
        nonlocal pos
        size = struct.calcsize(fmt)
        (value,) = struct.unpack_from(fmt, view, pos)
        pos += size
        return value

    while pos < len(view):
        name_len = take("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        dtype_len = take("<I")
        dtype = np.dtype(bytes(view[pos:pos + dtype_len]).decode("ascii"))
        pos += dtype_len
        ndim = take("<I")
        shape = tuple(take("<Q") for _ in range(ndim))
        nbytes = take("<Q")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
        out[name] = arr
    return out


def save_checkpoint(
    path: str | Path,
    model: SegModel,
    seed: int,
    epoch: int = 0,
    loss_history: dict[str, list[float]] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "seed": seed,
        "epoch": epoch,
        "loss_history": loss_history or {},
    }
    if extra:
        meta["extra"] = extra
    meta_bytes = json.dumps(meta, sort_keys=True, indent=2).encode("utf-8")
    params_bytes = _pack(_named_arrays(model))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in (("meta.json", meta_bytes), ("params.bin", params_bytes)):
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            zf.writestr(info, payload)


def load_checkpoint(path: str | Path) -> tuple[SegModel, dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"missing checkpoint file: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = _unpack(zf.read("params.bin"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, struct.error) as exc:
        raise LoadError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint version in {path}: {meta.get('format_version')}")
    config = ModelConfig(**meta["config"])
    model = SegModel(config)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
