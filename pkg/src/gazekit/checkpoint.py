"""Versioned checkpoint container.

Layout::

    b"GAZEKIT\\x00"  magic
    <u4 schema version> <u4 header length>
    header JSON (UTF-8, sorted keys): kind, config, meta, tensor index
    raw little-endian tensor bytes, in index order

The byte stream is a pure function of (kind, config, meta, tensors), so
identical training runs produce identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GAZEKIT\x00"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, state: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy() if isinstance(state[name], torch.Tensor) else np.asarray(state[name])
        arr = np.asarray(arr, order="C")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "meta": meta or {}, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_checkpoint(path, expect_kind: str | None = None):
    """Return ``(kind, config, state, meta)``; ``state`` maps names to torch tensors."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a gazekit checkpoint")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {version}")
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind!r} checkpoint, found {header['kind']!r}")
    body = start + hlen
    need = body + sum(t["nbytes"] for t in header["tensors"])
    if len(data) != need:
        raise CheckpointError(f"{path}: expected {need} bytes, file has {len(data)} (truncated?)")
    state = {}
    for t in header["tensors"]:
        raw = data[body + t["offset"]: body + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiuc" else t["dtype"])
        state[t["name"]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    return header["kind"], header["config"], state, header["meta"]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
