"""Synthetic "moving shapes" videos with exact ground-truth tubelets.

Objects move on straight lines with integer-snapped centers, so the analytic
box ``(cx - r, cy - r, cx + r, cy + r)`` is also the tight box of the rendered
pixels.  Questions ask for the k-th instance of a colored shape to appear.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .annotations import write_annotations
from .tubelet import BoundingBox, QASample, Tubelet, VideoMeta

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth")
SPLITS = ("train", "val", "test")
# Question counts of the challenge splits; desk-scale splits keep the ratios.
REFERENCE_SPLIT_SIZES = {"train": 1859, "val": 3051, "test": 1859}


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    appearance_frame: int
    start: tuple[float, float]  # center at appearance_frame
    velocity: tuple[float, float]  # px / frame
    half_size: int

    def center(self, t: int) -> tuple[int, int]:
        dt = t - self.appearance_frame
        x = self.start[0] + self.velocity[0] * dt
        y = self.start[1] + self.velocity[1] * dt
        return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))

    def box(self, t: int) -> BoundingBox:
        cx, cy = self.center(t)
        r = self.half_size
        return BoundingBox(float(cx - r), float(cy - r), float(cx + r), float(cy + r))

    @property
    def label(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_frames: int
    width: int
    height: int
    fps: float
    objects: tuple[SceneObject, ...] = ()


@dataclass(frozen=True)
class SceneParams:
    width: int = 64
    height: int = 64
    fps: float = 30.0
    min_frames: int = 30
    max_frames: int = 60
    min_objects: int = 1
    max_objects: int = 4
    min_half_size: int = 5
    max_half_size: int = 9
    max_speed: float = 0.6
    max_appear_fraction: float = 0.5
    repeat_class_prob: float = 0.35
    min_visible_fraction: float = 0.3
    max_retries: int = 200


@dataclass(frozen=True)
class DatasetSplitSpec:
    name: str
    num_samples: int
    seed: int

    def __post_init__(self):
        if self.name not in SPLITS:
            raise ValueError(f"unknown split {self.name!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def scaled_split_sizes(scale: float = 0.01) -> dict[str, int]:
    return {k: max(1, int(np.floor(v * scale + 0.5))) for k, v in REFERENCE_SPLIT_SIZES.items()}


def object_mask(obj: SceneObject, t: int, height: int, width: int) -> np.ndarray:
    """Unoccluded pixel mask of ``obj`` at frame ``t`` (ignores visibility)."""
    cx, cy = obj.center(t)
    r = obj.half_size
    mask = np.zeros((height, width), dtype=bool)
    if obj.shape == "square":
        mask[max(cy - r, 0) : max(cy + r, 0), max(cx - r, 0) : max(cx + r, 0)] = True
    elif obj.shape == "circle":
        ys = np.arange(height)[:, None] + 0.5
        xs = np.arange(width)[None, :] + 0.5
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif obj.shape == "triangle":
        # stair rasterization: row k (from the apex) spans 2 * ceil((k + 1) / 2) pixels
        for k in range(2 * r):
            y = cy - r + k
            if not 0 <= y < height:
                continue
            hw = (k + 2) // 2
            mask[y, max(cx - hw, 0) : max(cx + hw, 0)] = True
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    return mask


def id_map(scene: SceneSpec, t: int) -> np.ndarray:
    """Index of the topmost visible object per pixel, -1 for background."""
    ids = np.full((scene.height, scene.width), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        if t >= obj.appearance_frame:
            ids[object_mask(obj, t, scene.height, scene.width)] = i
    return ids


def render_video(scene: SceneSpec) -> np.ndarray:
    frames = np.zeros((scene.num_frames, scene.height, scene.width, 3), dtype=np.float32)
    for t in range(scene.num_frames):
        for obj in scene.objects:
            if t >= obj.appearance_frame:
                frames[t][object_mask(obj, t, scene.height, scene.width)] = COLORS[obj.color]
    return frames


def _draw_object(rng: np.random.Generator, params: SceneParams, num_frames: int, existing) -> SceneObject:
    if existing and rng.random() < params.repeat_class_prob:
        ref = existing[int(rng.integers(len(existing)))]
        color, shape = ref.color, ref.shape
    else:
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
    r = int(rng.integers(params.min_half_size, params.max_half_size + 1))
    appear = int(rng.integers(0, int(num_frames * params.max_appear_fraction) + 1))
    span = num_frames - 1 - appear
    lo_x, hi_x = r, params.width - r
    lo_y, hi_y = r, params.height - r
    for _ in range(50):
        start = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)))
        vel = tuple(float(v) for v in rng.uniform(-params.max_speed, params.max_speed, size=2))
        end = (start[0] + vel[0] * span, start[1] + vel[1] * span)
        if lo_x <= end[0] <= hi_x and lo_y <= end[1] <= hi_y:
            return SceneObject(shape, color, appear, start, vel, r)
    return SceneObject(shape, color, appear, start, (0.0, 0.0), r)


def _visible_enough(scene: SceneSpec, min_fraction: float) -> bool:
    for t in range(scene.num_frames):
        ids = id_map(scene, t)
        for i, obj in enumerate(scene.objects):
            if t < obj.appearance_frame:
                continue
            full = object_mask(obj, t, scene.height, scene.width).sum()
            if (ids == i).sum() < max(1, min_fraction * full):
                return False
    return True


def generate_scene(params: SceneParams, seed: int, num_objects: int | None = None) -> SceneSpec:
    """Draw a scene deterministically from ``seed``."""
    if params.width < 16 or params.height < 16:
        raise ValueError("canvas must be at least 16x16")
    if 2 * params.max_half_size > min(params.width, params.height):
        raise ValueError("objects larger than the canvas")
    lo, hi = (num_objects, num_objects) if num_objects is not None else (params.min_objects, params.max_objects)
    if not 1 <= lo <= hi <= 6:
        raise ValueError("scenes hold 1 to 6 objects")
    rng = np.random.default_rng(seed)
    for _ in range(params.max_retries):
        num_frames = int(rng.integers(params.min_frames, params.max_frames + 1))
        n = int(rng.integers(lo, hi + 1))
        objects: list[SceneObject] = []
        for _ in range(n):
            objects.append(_draw_object(rng, params, num_frames, objects))
        scene = SceneSpec(seed, num_frames, params.width, params.height, params.fps, tuple(objects))
        if _visible_enough(scene, params.min_visible_fraction):
            return scene
    raise SceneError(f"seed {seed}: no feasible placement after {params.max_retries} tries")


def ordinal(k: int) -> str:
    return ORDINALS[k - 1] if k <= len(ORDINALS) else f"{k}-th"


def appearance_order(scene: SceneSpec) -> dict[tuple[str, str], list[int]]:
    """Object indices per (color, shape), ordered by appearance then list index."""
    groups: dict[tuple[str, str], list[int]] = {}
    for i, obj in enumerate(scene.objects):
        groups.setdefault((obj.color, obj.shape), []).append(i)
    return {
        k: sorted(v, key=lambda i: (scene.objects[i].appearance_frame, i))
        for k, v in sorted(groups.items(), key=lambda kv: (list(COLORS).index(kv[0][0]), SHAPES.index(kv[0][1])))
    }


def object_tubelet(scene: SceneSpec, index: int) -> Tubelet:
    obj = scene.objects[index]
    return Tubelet(f"obj{index}", {t: obj.box(t) for t in range(obj.appearance_frame, scene.num_frames)})


def derive_qa(scene: SceneSpec, video_id: str = "video") -> list[QASample]:
    meta = VideoMeta(video_id, scene.num_frames, scene.fps, scene.width, scene.height)
    samples = []
    for (color, shape), members in appearance_order(scene).items():
        for k, idx in enumerate(members, start=1):
            question = f"track the {ordinal(k)} {color} {shape} that appears"
            samples.append(QASample(meta, question, f"{color} {shape}", (object_tubelet(scene, idx),)))
    return samples


def permute_colors(frames: np.ndarray, text: str, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Relabel palette colors consistently in pixels and in color words of ``text``."""
    names = list(COLORS)
    perm = [names[i] for i in rng.permutation(len(names))]
    mapping = dict(zip(names, perm))
    out = np.zeros_like(frames)
    for src, dst in mapping.items():
        mask = np.all(frames == np.asarray(COLORS[src], dtype=frames.dtype), axis=-1)
        out[mask] = COLORS[dst]
    words = [mapping.get(w, w) for w in text.split(" ")]
    return out, " ".join(words)


def scene_seed(split_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([split_seed, index]).generate_state(1, dtype=np.uint32)[0])


def scene_to_dict(scene: SceneSpec) -> dict:
    return asdict(scene)


def build_split(
    split: DatasetSplitSpec, params: SceneParams, out_dir, *, extra_manifest: dict | None = None
) -> dict:
    """Write ``annotations.json``, ``frames/<video_id>/`` and ``manifest.json`` under ``out_dir``.

    The test split is written without answers. Returns the manifest.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    samples: list[QASample] = []
    scenes = []
    skipped = []
    i = 0
    while len(samples) < split.num_samples:
        seed = scene_seed(split.seed, i)
        vid = f"{split.name}_{i:05d}"
        i += 1
        try:
            scene = generate_scene(params, seed)
        except SceneError:
            skipped.append(seed)
            continue
        qa = derive_qa(scene, vid)[: split.num_samples - len(samples)]
        samples.extend(qa)
        archive.write_video(out_dir / "frames" / vid, render_video(scene), scene.fps)
        scenes.append({"video_id": vid, "seed": seed, "scene": scene_to_dict(scene)})
    write_annotations(out_dir / "annotations.json", samples, include_answers=split.name != "test")
    digest = hashlib.sha256((out_dir / "annotations.json").read_bytes()).hexdigest()
    manifest = {
        "split": asdict(split),
        "params": asdict(params),
        "num_videos": len(scenes),
        "num_samples": len(samples),
        "scene_seeds": [s["seed"] for s in scenes],
        "skipped_seeds": skipped,
        "annotations_sha256": digest,
        "scenes": scenes,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest
