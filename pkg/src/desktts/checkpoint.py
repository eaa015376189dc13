"""Versioned single-file binary checkpoints.

Layout::

    b"DTTSCKPT" | u32 format version | u64 header length | header JSON | tensor blob

The header records the model kind, its config, free-form metadata and, for
every tensor, name/dtype/shape/offset into the blob. Tensors are stored as
little-endian raw arrays so checkpoints are portable and byte-stable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"DTTSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, kind: str, config: dict, state: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(header, state_dict)``; raises :class:`CheckpointError` on a kind mismatch."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a desktts checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header: dict[str, Any] = json.loads(data[start : start + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    blob = memoryview(data)[start + hlen :]
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("=")))
    return header, state
