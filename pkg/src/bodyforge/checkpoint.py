"""Single-file checkpoint format.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian array data concatenated in name-sorted order. The
header records the format version, the model config hash, per-array shape,
dtype, and byte offset (relative to the start of the data section), plus an
``extra`` object for anything JSON-serializable (phase/step counters, RNG
state, optimizer step count).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"BODYFRG1"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or version-incompatible checkpoint file."""


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config_hash: str, extra: dict | None = None) -> None:
    path = Path(path)
    names = sorted(arrays)
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            arr = arr.astype("<f8")
        else:
            arr = arr.astype("<f4")
        raw = arr.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config_hash": config_hash,
        "extra": extra or {},
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays, header). Arrays come back with native byte order."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: unreadable header: {err}") from err
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        data = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for name, meta in header["params"].items():
        dtype = _DTYPES.get(meta["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {meta['dtype']} for {name}")
        lo, hi = meta["offset"], meta["offset"] + meta["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(data[lo:hi], dtype=dtype).reshape(meta["shape"])
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header
