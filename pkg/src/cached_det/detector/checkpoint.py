"""Checkpoint container: magic, version, JSON header, then raw little-endian tensors.

Layout::

    b"CACHEDCK" | u32 version | u64 header length | header JSON | tensor bytes

The header holds the detector config, free-form metadata, and for every
parameter/buffer its name, dtype, shape, byte offset and length.  Encoding is
canonical (sorted keys, state-dict order), so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .cascade import CascadeDetector, DetectorConfig

MAGIC = b"CACHEDCK"
VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    """Corrupt or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


def save_checkpoint(model: CascadeDetector, path: str | Path, metadata: dict | None = None) -> Path:
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "cached-det-checkpoint", "version": VERSION,
              "config": model.cfg.to_dict(), "metadata": metadata or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    return path


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    start = len(MAGIC) + 12
    try:
        header = json.loads(data[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointVersionError(f"header declares version {header.get('version')!r}, "
                                     f"expected {VERSION}")
    return header, start + hlen


def load_checkpoint(path: str | Path) -> CascadeDetector:
    data = Path(path).read_bytes()
    header, body = read_header(data)
    try:
        cfg = DetectorConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint header: {exc}") from None
    model = CascadeDetector(cfg)
    state = {}
    for e in header["tensors"]:
        start = body + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated inside tensor {e['name']}")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        state[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]).reshape(e["shape"]).copy())
    first = next(iter(state.values()), None)
    if first is not None and first.is_floating_point():
        model = model.to(first.dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model: {exc}") from None
    model.mark_ready()
    return model


def checkpoint_metadata(path: str | Path) -> dict:
    header, _ = read_header(Path(path).read_bytes())
    return header["metadata"]
