"""Raw frame archive: one directory per video with a header and one RGB file per frame."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

HEADER = "header.json"


def frame_name(index: int) -> str:
    return f"{index:05d}.rgb"


def write_video(directory, frames: np.ndarray, fps: float) -> None:
    """Store ``frames`` (T x H x W x 3, values in [0, 1]) as 8-bit raw RGB."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t, h, w, c = frames.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    header = {"width": w, "height": h, "num_frames": t, "fps": fps, "dtype": "uint8", "channels": 3}
    (directory / HEADER).write_text(json.dumps(header, sort_keys=True) + "\n")
    data = np.clip(np.floor(frames * 255.0 + 0.5), 0, 255).astype(np.uint8)
    for i in range(t):
        (directory / frame_name(i)).write_bytes(data[i].tobytes())


def read_header(directory) -> dict:
    return json.loads((Path(directory) / HEADER).read_text())


def read_video(directory, indices=None) -> np.ndarray:
    """Load frames as float32 in [0, 1]; ``indices`` selects a subset in the given order."""
    directory = Path(directory)
    header = read_header(directory)
    h, w = header["height"], header["width"]
    if indices is None:
        indices = range(header["num_frames"])
    out = np.empty((len(indices), h, w, 3), dtype=np.float32)
    for k, i in enumerate(indices):
        if not 0 <= i < header["num_frames"]:
            raise IndexError(f"{directory}: frame {i} out of range")
        raw = np.frombuffer((directory / frame_name(i)).read_bytes(), dtype=np.uint8)
        out[k] = raw.reshape(h, w, 3) / np.float32(255.0)
    return out
