"""Command implementations: gen-data, train, infer, eval.

Each command reads the outputs of the previous stage, checks that they were
produced under a compatible configuration, and refuses to overwrite its own
outputs unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import archive
from .annotations import PredictedTrack, PredictionRecord, read_annotations, read_predictions, write_predictions
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .grounding import GrounderConfig, GrounderState, GroundingExample, new_state, predict_tubelet, train_grounder
from .hota import HOTAReport, TrackSet, compute_hota, write_report
from .prompt import Prompt, compose, question_only
from .synth import SPLITS, DatasetSplitSpec, build_split, permute_colors
from .tubelet import BoundingBox, QASample, SamplingConfig, Tubelet, expand_predictions, sample_frame_indices
from .vqa import (
    AnswerResult,
    ExternalEndpoint,
    VQAModelState,
    external_answer,
    oracle_answer,
    predict_answer,
    train_vqa,
    video_features,
)

log = logging.getLogger(__name__)

AnswerFn = Callable[[np.ndarray, QASample], AnswerResult]


class PipelineError(RuntimeError):
    pass


class MissingInput(PipelineError):
    pass


class HashMismatch(PipelineError):
    pass


class OutputExists(PipelineError):
    pass


class StageError(PipelineError):
    """An error raised inside one pipeline stage, tagged with that stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --- hashing -----------------------------------------------------------------


def derived_seed(global_seed: int, seed: int) -> int:
    return int(np.random.SeedSequence([global_seed, seed]).generate_state(1)[0] & 0x7FFFFFFF)


def stage_hashes(cfg: RunConfig) -> dict[str, str]:
    """Hashes of the settings each stage depends on, chained through upstream stages."""
    d = cfg.to_dict()
    data = config_hash({"seed": d["seed"], "data": d["data"], "scene": d["scene"]})
    vqa = config_hash({"data": data, "vqa": d["vqa"]})
    grounder = config_hash(
        {
            "data": data,
            "grounder": d["grounder"],
            "ema": d["ema"],
            "sampling": d["sampling"],
            "prompt_mode": d["prompt_mode"],
            "color_augment": d["color_augment"],
        }
    )
    return {"data": data, "vqa": vqa, "grounder": grounder}


def _stamp(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "config_hash": cfg.hash(), "stage_hashes": stage_hashes(cfg), **extra}


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _check_stage(found: dict, cfg: RunConfig, stage: str, what) -> None:
    want = stage_hashes(cfg)[stage]
    got = found.get("stage_hashes", {}).get(stage)
    if got != want:
        raise HashMismatch(f"{what}: produced under {stage} hash {got}, current config gives {want}")


def _claim(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise OutputExists(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.parent.mkdir(parents=True, exist_ok=True)


# --- data --------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> dict[str, dict]:
    out = {}
    for split in SPLITS:
        d = cfg.data_dir(split)
        _claim(d, force)
        spec = DatasetSplitSpec(split, cfg.data.sizes()[split], derived_seed(cfg.seed, cfg.data.seeds()[split]))
        out[split] = build_split(spec, cfg.scene, d, extra_manifest=_stamp(cfg, "gen-data"))
        log.info("%s: %d samples over %d videos", split, out[split]["num_samples"], out[split]["num_videos"])
    return out


def load_split(cfg: RunConfig, split: str) -> list[QASample]:
    d = cfg.data_dir(split)
    if not (d / "manifest.json").exists():
        raise MissingInput(f"{d}: no dataset; run gen-data first")
    _check_stage(json.loads((d / "manifest.json").read_text()), cfg, "data", d)
    return read_annotations(d / "annotations.json")


class VideoCache:
    """Loads each full video once; samples of the same video share the array."""

    def __init__(self, frames_dir: Path):
        self.frames_dir = frames_dir
        self._videos: dict[str, np.ndarray] = {}

    def __call__(self, video_id: str) -> np.ndarray:
        if video_id not in self._videos:
            d = self.frames_dir / video_id
            if not d.exists():
                raise MissingInput(f"{d}: frame archive missing")
            self._videos[video_id] = archive.read_video(d)
        return self._videos[video_id]


def grounding_prompt(sample: QASample, answer: str | None, mode: str) -> Prompt:
    if mode == "question_only":
        return question_only(sample.question)
    return compose(sample.question, answer)


def make_example(frames: np.ndarray, sample: QASample, prompt: str, sampling: SamplingConfig) -> GroundingExample:
    v = sample.video
    idx = sample_frame_indices(v.num_frames, v.native_fps, sampling)
    if len(sample.gt_tracks) != 1:
        raise ValueError(f"{sample.key}: training needs exactly one ground-truth track")
    boxes = sample.gt_tracks[0].boxes
    blank = (0.5, 0.5, 0.1, 0.1)  # placeholder where the target is not visible; masked out of the loss
    full = np.array([boxes[j].to_cxcywh(v.width, v.height) if j in boxes else blank for j in range(v.num_frames)])
    vis = np.array([j in boxes for j in range(v.num_frames)])
    return GroundingExample(
        frames[idx],
        prompt,
        full[idx].astype(np.float32),
        vis[idx],
        tuple(idx),
        frames,
        full.astype(np.float32),
        vis,
        sampling.stride(v.native_fps),
    )


def _color_augment(example: GroundingExample, rng: np.random.Generator) -> GroundingExample:
    frames, prompt = permute_colors(np.asarray(example.frames), example.prompt, rng)
    return replace(example, frames=frames, prompt=prompt)


# --- training ----------------------------------------------------------------


def cmd_train(cfg: RunConfig, stage: str, force: bool = False) -> dict:
    if stage == "vqa":
        return _train_vqa(cfg, force)
    if stage == "grounder":
        return _train_grounder(cfg, force)
    raise PipelineError(f"unknown stage {stage!r}; expected vqa or grounder")


def _train_vqa(cfg: RunConfig, force: bool) -> dict:
    path = cfg.checkpoint_path("vqa")
    _claim(path, force)
    samples = load_split(cfg, "train")
    videos = VideoCache(cfg.data_dir("train") / "frames")
    feats: dict[str, np.ndarray] = {}
    for s in samples:
        if s.video.video_id not in feats:
            feats[s.video.video_id] = video_features(videos(s.video.video_id))
    vcfg = replace(cfg.vqa, seed=derived_seed(cfg.seed, cfg.vqa.seed))
    state = train_vqa(samples, [feats[s.video.video_id] for s in samples], vcfg)
    steps = vcfg.epochs * -(-len(samples) // vcfg.batch_size)
    stamp = _stamp(cfg, "train-vqa")
    save_checkpoint(path, state.parameters(), tag="raw", config_hash=stamp["config_hash"], step=steps, meta={**stamp, "vqa": state.meta()})
    return {"checkpoint": str(path), "loss": state.history}


def _train_grounder(cfg: RunConfig, force: bool) -> dict:
    paths = {"raw": cfg.checkpoint_path("grounder", "raw")}
    if cfg.ema.enabled:
        paths["ema"] = cfg.checkpoint_path("grounder", "ema")
    for p in paths.values():
        _claim(p, force)
    samples = load_split(cfg, "train")
    videos = VideoCache(cfg.data_dir("train") / "frames")
    examples = [
        make_example(videos(s.video.video_id), s, grounding_prompt(s, s.answer, cfg.prompt_mode).text, cfg.sampling)
        for s in samples
    ]
    gcfg = replace(cfg.grounder, ema_decay=cfg.ema.decay, seed=derived_seed(cfg.seed, cfg.grounder.seed))
    state, ema = train_grounder(
        examples,
        gcfg,
        cfg.ema.enabled,
        image_size=cfg.scene.width,
        max_sampled_frames=cfg.sampling.max_sampled_frames,
        augment=_color_augment if cfg.color_augment else None,
    )
    stamp = _stamp(cfg, "train-grounder")
    meta = {**stamp, "model_config": state.config.to_dict(), "history": state.history, "train_config": state.train_config}
    save_checkpoint(paths["raw"], state.parameters(), tag="raw", config_hash=stamp["config_hash"], step=state.step, meta=meta)
    if ema is not None:
        save_checkpoint(paths["ema"], ema.average, tag="ema", config_hash=stamp["config_hash"], step=ema.step, meta=meta)
    return {"checkpoints": {k: str(v) for k, v in paths.items()}, "loss": state.history}


def load_vqa(cfg: RunConfig) -> VQAModelState:
    path = cfg.checkpoint_path("vqa")
    if not path.exists():
        raise MissingInput(f"{path}: no answer model; run train --stage vqa first")
    header, vec = load_checkpoint(path)
    _check_stage(header["meta"], cfg, "vqa", path)
    return VQAModelState.from_meta(header["meta"]["vqa"], vec)


def load_grounder(cfg: RunConfig, tag: str | None = None) -> GrounderState:
    path = cfg.checkpoint_path("grounder", tag or cfg.infer.weights)
    if not path.exists():
        raise MissingInput(f"{path}: no grounder; run train --stage grounder first")
    header, vec = load_checkpoint(path)
    _check_stage(header["meta"], cfg, "grounder", path)
    state = new_state(GrounderConfig.from_dict(header["meta"]["model_config"]))
    state = state.with_parameters(vec)
    state.step = header["step"]
    return state


# --- inference ---------------------------------------------------------------


@dataclass
class InferenceResult:
    tubelet: Tubelet  # dense: one box per video frame
    confidence: np.ndarray  # (num_frames,) visibility confidence, expanded like the boxes
    prompt: Prompt
    answer: AnswerResult | None


def infer_full(
    frames: np.ndarray,
    sample: QASample,
    answer_fn: AnswerFn | None,
    grounder: GrounderState,
    sampling: SamplingConfig,
    prompt_mode: str = "composed",
    object_id: str = "pred",
) -> InferenceResult:
    """Answer, compose the prompt, ground on sampled frames and expand back to every frame.

    ``answer_fn`` is not called in question-only mode. Errors are re-raised as
    ``StageError`` naming the stage that failed.
    """
    v = sample.video
    answer = None
    if prompt_mode != "question_only":
        if answer_fn is None:
            raise StageError("vqa", ValueError("composed prompts need an answer source"))
        try:
            answer = answer_fn(frames, sample)
        except Exception as exc:
            raise StageError("vqa", exc) from exc
    try:
        prompt = grounding_prompt(sample, answer.answer if answer else None, prompt_mode)
    except Exception as exc:
        raise StageError("prompt", exc) from exc
    try:
        idx = sample_frame_indices(v.num_frames, v.native_fps, sampling)
    except Exception as exc:
        raise StageError("sampling", exc) from exc
    try:
        sparse = predict_tubelet(frames[idx], prompt, grounder, idx)
    except Exception as exc:
        raise StageError("grounding", exc) from exc
    try:
        boxes = {
            int(i): BoundingBox.from_cxcywh(*b, v.width, v.height) for i, b in zip(idx, sparse.boxes)
        }
        dense = expand_predictions(Tubelet(object_id, boxes), sampling, v.num_frames, v.native_fps)
        conf = _expand_values(sparse.confidence, idx, v.num_frames)
    except Exception as exc:
        raise StageError("expansion", exc) from exc
    return InferenceResult(dense, conf, prompt, answer)


def _expand_values(values: np.ndarray, idx, num_frames: int) -> np.ndarray:
    """Per-frame copy of the value at the latest sampled frame at or before it."""
    pos = np.searchsorted(np.asarray(idx), np.arange(num_frames), side="right") - 1
    return np.asarray(values)[np.clip(pos, 0, None)]


def answer_source(cfg: RunConfig, kind: str) -> AnswerFn | None:
    if cfg.prompt_mode == "question_only":
        return None
    if kind == "oracle":
        return lambda frames, sample: oracle_answer(sample)
    if kind == "model":
        state = load_vqa(cfg)
        return lambda frames, sample: predict_answer(frames, sample.question, state)
    if kind == "external":
        endpoint = ExternalEndpoint(cfg.infer.external_url, cfg.infer.external_timeout)
        return lambda frames, sample: external_answer(endpoint, sample.video.video_id, sample.question)
    raise PipelineError(f"unknown answer source {kind!r}")


def gate(result: InferenceResult, threshold: float) -> Tubelet:
    """Drop frames whose visibility confidence is below ``threshold``."""
    keep = {f: b for f, b in result.tubelet.boxes.items() if result.confidence[f] >= threshold}
    return Tubelet(result.tubelet.object_id, keep)


def cmd_infer(cfg: RunConfig, split: str, answers: str | None = None, force: bool = False) -> Path:
    answers = answers or cfg.infer.answers
    out = cfg.predictions_path(split, answers)
    samples = load_split(cfg, split)
    grounder = load_grounder(cfg)
    fn = answer_source(cfg, answers)
    _claim(out, force)
    videos = VideoCache(cfg.data_dir(split) / "frames")
    records, metas = [], {}
    for s in samples:
        res = infer_full(videos(s.video.video_id), s, fn, grounder, cfg.sampling, cfg.prompt_mode)
        track = gate(res, cfg.infer.confidence_threshold)
        conf = float(np.mean(res.confidence)) if len(res.confidence) else 0.0
        records.append(
            PredictionRecord(
                s.video.video_id,
                s.question,
                (PredictedTrack(track, conf),),
                res.answer.answer if res.answer else None,
                res.answer.source if res.answer else None,
                {"prompt": res.prompt.text},
            )
        )
        metas[s.video.video_id] = s.video
    meta = _stamp(
        cfg,
        "infer",
        split=split,
        answers=answers,
        weights=cfg.infer.weights,
        annotations_sha256=file_sha256(cfg.data_dir(split) / "annotations.json"),
    )
    write_predictions(out, records, list(metas.values()), meta)
    return out


# --- evaluation --------------------------------------------------------------


def sequence_name(video_id: str, question: str) -> str:
    return f"{video_id}::{question}"


def cmd_eval(cfg: RunConfig, predictions, annotations, report_path=None, force: bool = False) -> HOTAReport:
    predictions, annotations = Path(predictions), Path(annotations)
    for p in (predictions, annotations):
        if not p.exists():
            raise MissingInput(f"{p}: not found")
    records, _, pmeta = read_predictions(predictions)
    gt_samples = read_annotations(annotations)
    ann_hash = file_sha256(annotations)
    if "annotations_sha256" in pmeta and pmeta["annotations_sha256"] != ann_hash:
        raise HashMismatch(f"{predictions} was produced from different annotations than {annotations}")
    pred = TrackSet({sequence_name(r.video_id, r.question): [t.tubelet for t in r.tracks] for r in records})
    gt = TrackSet({sequence_name(s.video.video_id, s.question): list(s.gt_tracks) for s in gt_samples}, "ground_truth")
    report = compute_hota(pred, gt)
    if report_path is not None:
        report_path = Path(report_path)
        _claim(report_path, force)
        meta = _stamp(
            cfg,
            "eval",
            predictions=str(predictions.name),
            predictions_sha256=file_sha256(predictions),
            annotations_sha256=ann_hash,
            predictions_meta=pmeta,
        )
        write_report(report, report_path, meta)
    return report
