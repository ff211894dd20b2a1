"""TDT tensor files and checkpoint archives.

A TDT record is ``b"TDT1"``, a little-endian uint32 header length, a UTF-8
JSON header ``{"shape": [...], "dtype": "f32", "order": "C"}`` and the raw
little-endian payload. An archive is ``b"TDTA"``, a uint32 manifest length,
a JSON manifest (free-form ``meta`` plus a tensor index of byte offsets into
the record area) and the concatenated records.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import DimensionError, TDTIOError

MAGIC = b"TDT1"
ARCHIVE_MAGIC = b"TDTA"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
            return name
    raise DimensionError(f"unsupported dtype for TDT: {arr.dtype}")


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, order="C")


def encode(x) -> bytes:
    arr = _as_numpy(x)
    name = _dtype_name(arr)
    header = json.dumps({"shape": list(arr.shape), "dtype": name, "order": "C"}, separators=(",", ":")).encode()
    payload = arr.astype(_DTYPES[name], copy=False).tobytes(order="C")
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode one record from the start of ``buf``; returns (array, bytes consumed)."""
    if buf[:4] != MAGIC:
        raise TDTIOError(f"bad TDT magic {buf[:4]!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    if header.get("order", "C") != "C":
        raise TDTIOError("only C-order TDT payloads are supported")
    dt = _DTYPES[header["dtype"]]
    shape = tuple(header["shape"])
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    start = 8 + hlen
    end = start + n * dt.itemsize
    if len(buf) < end:
        raise TDTIOError("truncated TDT payload")
    arr = np.frombuffer(buf[start:end], dtype=dt).reshape(shape).copy()
    return arr, end


def save(path, x) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(x))
    except OSError as e:
        raise TDTIOError(f"cannot write {path}: {e}") from e


def load(path) -> torch.Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise TDTIOError(f"cannot read {path}: {e}") from e
    arr, _ = decode(buf)
    return torch.from_numpy(arr)


def save_archive(path, tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> None:
    body = io.BytesIO()
    index = []
    for name, t in tensors.items():
        rec = encode(t)
        index.append({"name": name, "offset": body.tell(), "length": len(rec)})
        body.write(rec)
    manifest = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    try:
        path.write_bytes(ARCHIVE_MAGIC + struct.pack("<I", len(manifest)) + manifest + body.getvalue())
    except OSError as e:
        raise TDTIOError(f"cannot write {path}: {e}") from e


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise TDTIOError(f"cannot read {path}: {e}") from e
    if buf[:4] != ARCHIVE_MAGIC:
        raise TDTIOError(f"{path} is not a TDT archive")
    (mlen,) = struct.unpack("<I", buf[4:8])
    manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
    base = 8 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        arr, _ = decode(buf[start : start + entry["length"]])
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, manifest["meta"]
