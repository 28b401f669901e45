"""Checkpoint container: a JSON manifest line (per-parameter name, shape,
dtype, byte offset, plus an arbitrary metadata object) followed by the raw
little-endian parameter bytes.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataFormatError

_FORMAT = "cohortmil-checkpoint"


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": _FORMAT,
        "version": 1,
        "meta": meta or {},
        "entries": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint: {e}") from e
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError("checkpoint has no header line", line=1)
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"bad checkpoint header: {e}", line=1) from e
    if header.get("format") != _FORMAT:
        raise DataFormatError("not a cohortmil checkpoint", line=1)
    payload = raw[nl + 1:]
    arrays = {}
    for ent in header["entries"]:
        start, n = ent["offset"], ent["nbytes"]
        if start + n > len(payload):
            raise DataFormatError(
                f"entry {ent['name']!r} range [{start}, {start + n}) beyond payload "
                f"size {len(payload)} (truncated file?)")
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload[start:start + n], dtype=dt)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(ent["dtype"])
    return arrays, header.get("meta", {})
