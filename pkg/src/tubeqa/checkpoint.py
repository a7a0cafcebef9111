"""Flat parameter checkpoints.

Layout: 8-byte magic ``TUBEQA01``, little-endian uint32 header length, UTF-8
JSON header (``tag``, ``config_hash``, ``param_count``, ``step`` plus free-form
metadata), then ``param_count`` little-endian float32 values.  Raw and EMA
weights share the format and differ only by ``tag``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TUBEQA01"
TAGS = ("raw", "ema")


class CheckpointError(ValueError):
    pass


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: np.ndarray, *, tag: str, config_hash: str, step: int, meta: dict | None = None) -> None:
    if tag not in TAGS:
        raise CheckpointError(f"unknown tag {tag!r}")
    vec = np.ascontiguousarray(params, dtype="<f4").reshape(-1)
    header = {"tag": tag, "config_hash": config_hash, "param_count": int(vec.size), "step": int(step)}
    header["meta"] = meta or {}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(vec.tobytes())


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n].decode())
    body = data[12 + n :]
    if len(body) != 4 * header["param_count"]:
        raise CheckpointError(f"{path}: expected {header['param_count']} parameters, found {len(body) // 4}")
    return header, np.frombuffer(body, dtype="<f4").copy()
