"""Annotation and prediction JSON files.

Annotation layout::

    {"videos": [{"video_id", "num_frames", "native_fps", "width", "height"}],
     "samples": [{"video_id", "question", "answer"?,
                  "gt_tracks": [{"object_id", "boxes": {"<frame>": [x1, y1, x2, y2]}}]}]}

Prediction files use the same sample layout with ``pred_tracks`` in place of
``gt_tracks``; each predicted track also carries a ``confidence``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .tubelet import BoundingBox, QASample, Tubelet, VideoMeta, validate_tubelet


class AnnotationError(ValueError):
    """Malformed JSON or schema violation in an annotation/prediction file."""


@dataclass(frozen=True)
class PredictedTrack:
    tubelet: Tubelet
    confidence: float


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    question: str
    tracks: tuple[PredictedTrack, ...]
    answer: str | None = None
    answer_source: str | None = None
    extra: dict = field(default_factory=dict)


def _load_json(path) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _require(obj: dict, key: str, where: str, types) -> Any:
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: expected an object")
    if key not in obj:
        raise AnnotationError(f"{where}: missing field '{key}'")
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise AnnotationError(f"{where}.{key}: wrong type {type(value).__name__}")
    return value


def _parse_boxes(raw, where: str) -> dict[int, BoundingBox]:
    if not isinstance(raw, dict):
        raise AnnotationError(f"{where}.boxes: expected an object keyed by frame")
    boxes = {}
    for key, coords in raw.items():
        try:
            frame = int(key)
        except ValueError:
            raise AnnotationError(f"{where}.boxes: frame key {key!r} is not an integer") from None
        if str(frame) != key:
            raise AnnotationError(f"{where}.boxes: frame key {key!r} is not canonical")
        if (
            not isinstance(coords, list)
            or len(coords) != 4
            or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coords)
        ):
            raise AnnotationError(f"{where}.boxes[{key}]: expected [x1, y1, x2, y2]")
        boxes[frame] = BoundingBox(*coords)
    return dict(sorted(boxes.items()))


def _dump_boxes(t: Tubelet) -> dict[str, list]:
    return {str(f): list(b.as_tuple()) for f, b in sorted(t.boxes.items())}


def _parse_videos(doc, path) -> dict[str, VideoMeta]:
    videos = {}
    for i, raw in enumerate(_require(doc, "videos", str(path), list)):
        where = f"videos[{i}]"
        vid = _require(raw, "video_id", where, str)
        if vid in videos:
            raise AnnotationError(f"{where}: duplicate video_id {vid!r}")
        try:
            videos[vid] = VideoMeta(
                vid,
                _require(raw, "num_frames", where, int),
                float(_require(raw, "native_fps", where, (int, float))),
                _require(raw, "width", where, int),
                _require(raw, "height", where, int),
            )
        except ValueError as exc:
            if isinstance(exc, AnnotationError):
                raise
            raise AnnotationError(f"{where}: {exc}") from exc
    return videos


def read_annotations(path) -> list[QASample]:
    doc = _load_json(path)
    videos = _parse_videos(doc, path)
    samples = []
    seen = set()
    for i, raw in enumerate(_require(doc, "samples", str(path), list)):
        where = f"samples[{i}]"
        vid = _require(raw, "video_id", where, str)
        if vid not in videos:
            raise AnnotationError(f"{where}.video_id: unknown video {vid!r}")
        question = _require(raw, "question", where, str)
        if not question.strip():
            raise AnnotationError(f"{where}.question: empty")
        answer = None
        if "answer" in raw:
            answer = _require(raw, "answer", where, str)
        if (vid, question) in seen:
            raise AnnotationError(f"{where}: duplicate (video_id, question) {vid!r}, {question!r}")
        seen.add((vid, question))
        tracks = []
        for j, rt in enumerate(_require(raw, "gt_tracks", where, list)):
            twhere = f"{where}.gt_tracks[{j}]"
            oid = _require(rt, "object_id", twhere, (str, int))
            t = Tubelet(oid, _parse_boxes(_require(rt, "boxes", twhere, dict), twhere))
            problems = validate_tubelet(t, videos[vid])
            if problems:
                raise AnnotationError(f"{twhere}: {problems[0]}")
            tracks.append(t)
        samples.append(QASample(videos[vid], question, answer, tuple(tracks)))
    return samples


def _videos_block(metas) -> list[dict]:
    out, seen = [], set()
    for v in metas:
        if v.video_id in seen:
            continue
        seen.add(v.video_id)
        out.append(
            {
                "video_id": v.video_id,
                "num_frames": v.num_frames,
                "native_fps": v.native_fps,
                "width": v.width,
                "height": v.height,
            }
        )
    return out


def annotations_to_dict(samples: list[QASample], include_answers: bool = True) -> dict:
    doc_samples = []
    for s in samples:
        entry: dict[str, Any] = {"video_id": s.video.video_id, "question": s.question}
        if include_answers and s.answer is not None:
            entry["answer"] = s.answer
        entry["gt_tracks"] = [{"object_id": t.object_id, "boxes": _dump_boxes(t)} for t in s.gt_tracks]
        doc_samples.append(entry)
    return {"videos": _videos_block(s.video for s in samples), "samples": doc_samples}


def dump_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def write_annotations(path, samples: list[QASample], include_answers: bool = True) -> None:
    dump_json(annotations_to_dict(samples, include_answers), path)


def write_predictions(path, predictions: list[PredictionRecord], videos: list[VideoMeta], meta: dict | None = None) -> None:
    doc: dict[str, Any] = {}
    if meta:
        doc["meta"] = meta
    doc["videos"] = _videos_block(videos)
    doc["samples"] = []
    for p in predictions:
        entry: dict[str, Any] = {"video_id": p.video_id, "question": p.question}
        if p.answer is not None:
            entry["answer"] = p.answer
        if p.answer_source is not None:
            entry["answer_source"] = p.answer_source
        entry.update(p.extra)
        entry["pred_tracks"] = [
            {"object_id": tr.tubelet.object_id, "confidence": tr.confidence, "boxes": _dump_boxes(tr.tubelet)}
            for tr in p.tracks
        ]
        doc["samples"].append(entry)
    dump_json(doc, path)


def read_predictions(path) -> tuple[list[PredictionRecord], dict[str, VideoMeta], dict]:
    """Read a prediction file. An annotation file is accepted too (confidence 1)."""
    doc = _load_json(path)
    videos = _parse_videos(doc, path)
    records = []
    seen = set()
    for i, raw in enumerate(_require(doc, "samples", str(path), list)):
        where = f"samples[{i}]"
        vid = _require(raw, "video_id", where, str)
        question = _require(raw, "question", where, str)
        if (vid, question) in seen:
            raise AnnotationError(f"{where}: duplicate (video_id, question) {vid!r}, {question!r}")
        seen.add((vid, question))
        key = "pred_tracks" if "pred_tracks" in raw else "gt_tracks"
        tracks = []
        for j, rt in enumerate(_require(raw, key, where, list)):
            twhere = f"{where}.{key}[{j}]"
            oid = _require(rt, "object_id", twhere, (str, int))
            conf = float(rt.get("confidence", 1.0))
            tracks.append(PredictedTrack(Tubelet(oid, _parse_boxes(_require(rt, "boxes", twhere, dict), twhere)), conf))
        records.append(
            PredictionRecord(vid, question, tuple(tracks), raw.get("answer"), raw.get("answer_source"))
        )
    return records, videos, doc.get("meta", {})
