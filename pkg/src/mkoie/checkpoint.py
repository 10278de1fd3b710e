"""Single-file named-array container used for parameters, training state and
extractor weights.

Layout::

    magic   8 bytes   b"MKOIECKP"
    version uint32 LE
    hlen    uint64 LE
    header  hlen bytes of UTF-8 JSON: {"meta": ..., "arrays": [...], "payload_bytes": n}
    payload little-endian array data, concatenated in header order

Each array entry records ``name``, ``dtype`` (numpy string, little-endian),
``shape``, ``offset`` and ``nbytes`` relative to the payload start.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MKOIECKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file, or a corrupt header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.require(arr, requirements="C")
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "dtype": arr.dtype.newbyteorder("<").str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "arrays": table, "payload_bytes": offset},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(blob)[start + hlen :]
    if len(payload) < header["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"payload has {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(tuple(entry["shape"]))
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Atomically write ``arrays`` and ``meta`` (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(arrays, meta))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())
