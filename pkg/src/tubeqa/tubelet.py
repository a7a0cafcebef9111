"""Boxes, tubelets and the temporal sampling / expansion rules.

Frame indices are 0-based on the native timeline of the video. Boxes use the
corner convention ``(x1, y1, x2, y2)`` everywhere outside the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or malformed boxes."""


class SamplingError(ValueError):
    """Raised when a sparse prediction does not line up with the sampling grid."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    normalized: bool = False

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.as_tuple()):
            raise GeometryError(f"non-finite box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_degenerate(self) -> bool:
        return not (self.x2 > self.x1 and self.y2 > self.y1)

    def to_cxcywh(self, width: float, height: float) -> tuple[float, float, float, float]:
        """Normalized center format used inside the grounding model."""
        return (
            (self.x1 + self.x2) / 2.0 / width,
            (self.y1 + self.y2) / 2.0 / height,
            self.width / width,
            self.height / height,
        )

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h, width: float, height: float) -> "BoundingBox":
        return cls(
            float((cx - w / 2.0) * width),
            float((cy - h / 2.0) * height),
            float((cx + w / 2.0) * width),
            float((cy + h / 2.0) * height),
        )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two corner-convention boxes."""
    if a.is_degenerate() or b.is_degenerate():
        raise GeometryError(f"degenerate box in iou: {a.as_tuple()} / {b.as_tuple()}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Tubelet:
    object_id: Hashable
    boxes: Mapping[int, BoundingBox] = field(default_factory=dict)

    @property
    def frames(self) -> list[int]:
        return sorted(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    num_frames: int
    native_fps: float
    width: int
    height: int

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError(f"{self.video_id}: num_frames must be >= 1")
        if not self.native_fps > 0:
            raise ValueError(f"{self.video_id}: native_fps must be > 0")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"{self.video_id}: width and height must be >= 1")


@dataclass(frozen=True)
class SamplingConfig:
    """Temporal sampling for the grounder.

    ``duplication_factor=None`` means "use the sampling stride", which is 6 for
    30 fps video sampled at 5 fps.
    """

    target_fps: float = 5.0
    max_sampled_frames: int = 200
    duplication_factor: int | None = None

    def __post_init__(self):
        if not self.target_fps > 0:
            raise ValueError("target_fps must be > 0")
        if self.max_sampled_frames < 1:
            raise ValueError("max_sampled_frames must be >= 1")
        if self.duplication_factor is not None and self.duplication_factor < 1:
            raise ValueError("duplication_factor must be >= 1")

    def stride(self, native_fps: float) -> int:
        return max(1, int(np.floor(native_fps / self.target_fps + 0.5)))

    def factor(self, native_fps: float) -> int:
        if self.duplication_factor is not None:
            return self.duplication_factor
        return self.stride(native_fps)


@dataclass(frozen=True)
class QASample:
    video: VideoMeta
    question: str
    answer: str | None = None
    gt_tracks: tuple[Tubelet, ...] = ()

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError(f"{self.video.video_id}: empty question")

    @property
    def key(self) -> tuple[str, str]:
        return (self.video.video_id, self.question)


def sample_frame_indices(num_frames: int, native_fps: float, cfg: SamplingConfig) -> list[int]:
    """Frames fed to the grounder: every ``stride``-th frame from 0, capped.

    Over the cap, the strided list is thinned uniformly to exactly
    ``cfg.max_sampled_frames`` entries, keeping the first and last.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    stride = cfg.stride(native_fps)
    indices = list(range(0, num_frames, stride))
    cap = cfg.max_sampled_frames
    if len(indices) > cap:
        if cap == 1:
            return [indices[0]]
        pick = np.floor(np.arange(cap) * (len(indices) - 1) / (cap - 1) + 0.5).astype(int)
        indices = [indices[i] for i in pick]
    return indices


def expand_predictions(
    sparse: Tubelet, cfg: SamplingConfig, num_frames: int, native_fps: float = 30.0
) -> Tubelet:
    """Spread one box per sampled frame over the whole video.

    Each sampled box covers its own frame and the next ``factor - 1`` frames;
    later sampled boxes win on overlap, frames past the end are dropped, and any
    remaining gap (only possible after cap thinning) holds the previous box.
    """
    expected = sample_frame_indices(num_frames, native_fps, cfg)
    if sorted(sparse.boxes) != expected:
        raise SamplingError(
            f"sparse frames {sorted(sparse.boxes)[:8]}... do not match sampled grid "
            f"{expected[:8]}... for num_frames={num_frames}"
        )
    factor = cfg.factor(native_fps)
    dense: dict[int, BoundingBox] = {}
    for idx in expected:
        box = sparse.boxes[idx]
        for f in range(idx, min(idx + factor, num_frames)):
            dense[f] = box
    last = None
    for f in range(num_frames):
        if f in dense:
            last = dense[f]
        else:
            dense[f] = last
    return Tubelet(sparse.object_id, dict(sorted(dense.items())))


def validate_tubelet(t: Tubelet, v: VideoMeta, normalized: bool = False) -> list[str]:
    """Return the list of problems with ``t`` against ``v``; empty means valid."""
    problems = []
    xmax, ymax = (1.0, 1.0) if normalized else (float(v.width), float(v.height))
    for frame, box in sorted(t.boxes.items()):
        if not isinstance(frame, (int, np.integer)) or frame < 0 or frame >= v.num_frames:
            problems.append(f"frame {frame}: out of range [0, {v.num_frames})")
            continue
        if box.is_degenerate():
            problems.append(f"frame {frame}: degenerate box {box.as_tuple()}")
        elif box.x1 < 0 or box.y1 < 0 or box.x2 > xmax or box.y2 > ymax:
            problems.append(f"frame {frame}: box {box.as_tuple()} outside {xmax}x{ymax} canvas")
    return problems
