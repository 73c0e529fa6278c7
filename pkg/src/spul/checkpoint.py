"""Deterministic binary container for named float64 arrays.

Layout::

    b"SPULCKPT"                 8-byte magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON, sorted keys
    blobs                       float64 little-endian, in header["arrays"] order

The header lists ``[name, shape]`` for every array and a sha256 fingerprint
of their contents. Nothing time-dependent is written, so identical inputs
give byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPULCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def write_checkpoint(path, kind: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> str:
    names = sorted(arrays)
    fp = fingerprint_arrays(arrays)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [[n, list(np.shape(arrays[n]))] for n in names],
        "fingerprint": fp,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    return fp


def read_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; raises CheckpointError on any inconsistency."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    offset = 20 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at array {name}")
        arrays[name] = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    if fingerprint_arrays(arrays) != header["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint mismatch, file is corrupt")
    return header, arrays
