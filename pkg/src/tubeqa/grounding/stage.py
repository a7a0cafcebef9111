"""Stage 2: tubelet prediction from sampled frames and a grounding prompt, and its trainer."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from ..ema import EMAState, ema_init, ema_update
from ..prompt import Prompt
from .loss import grounding_loss
from .model import GrounderConfig, GroundingModel, build_vocab, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrounderTrainConfig:
    epochs: int = 20
    lr: float = 5e-5
    seed: int = 0
    batch_size: int = 4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    pointer_weight: float = 1.0
    schedule: str = "cosine"  # or "constant"
    warmup_steps: int = 50
    temporal_jitter: bool = True
    hflip: bool = True
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    local_radius: int | None = 2
    local_in_training: bool = False
    conv_channels: tuple[int, int] = (16, 32)

    def model_config(self, vocab, image_size: int, max_sampled_frames: int) -> GrounderConfig:
        return GrounderConfig(
            vocab=tuple(vocab),
            image_size=image_size,
            conv_channels=tuple(self.conv_channels),
            d_model=self.d_model,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            ffn_dim=2 * self.d_model,
            max_sampled_frames=max_sampled_frames,
            local_radius=self.local_radius,
            local_in_training=self.local_in_training,
        )


@dataclass
class GroundingExample:
    """One training/inference unit aligned to the sampled frames."""

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    prompt: str
    gt_boxes: np.ndarray  # (T, 4) normalized cx, cy, w, h; ignored where not visible
    visible: np.ndarray  # (T,) bool
    sampled_indices: tuple[int, ...] = ()
    # full-rate video, used for temporal-offset augmentation during training
    video_frames: np.ndarray | None = None
    video_boxes: np.ndarray | None = None
    video_visible: np.ndarray | None = None
    stride: int = 1

    def augmented(
        self, rng: np.random.Generator, jitter: bool, hflip: bool, extra: Callable | None = None
    ) -> "GroundingExample":
        frames, boxes, visible = self.frames, self.gt_boxes, self.visible
        if jitter and self.video_frames is not None and self.stride > 1:
            offset = int(rng.integers(min(self.stride, len(self.video_frames))))
            n = len(self.frames)
            frames = self.video_frames[offset :: self.stride][:n]
            boxes = self.video_boxes[offset :: self.stride][:n]
            visible = self.video_visible[offset :: self.stride][:n]
        if hflip and rng.random() < 0.5:
            frames = frames[:, :, ::-1]
            boxes = boxes.copy()
            boxes[:, 0] = 1.0 - boxes[:, 0]
        out = GroundingExample(frames, self.prompt, boxes, visible)
        return extra(out, rng) if extra is not None else out


@dataclass
class SparseTubeletPrediction:
    boxes: np.ndarray  # (T, 4) normalized cx, cy, w, h
    confidence: np.ndarray  # (T,)
    sampled_indices: tuple[int, ...]


@dataclass
class GrounderState:
    config: GrounderConfig
    model: GroundingModel
    history: list[float] = field(default_factory=list)
    step: int = 0
    train_config: dict = field(default_factory=dict)

    def parameters(self) -> np.ndarray:
        return parameters_to_vector(self.model.parameters()).detach().cpu().numpy().astype(np.float32)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    def with_parameters(self, vec: np.ndarray) -> "GrounderState":
        vec = np.asarray(vec, dtype=np.float32)
        if vec.size != self.param_count:
            raise ValueError(f"parameter count mismatch: model {self.param_count}, vector {vec.size}")
        model = copy.deepcopy(self.model)
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(vec.copy()), model.parameters())
        return replace(self, model=model, history=list(self.history))


def new_state(config: GrounderConfig, seed: int = 0) -> GrounderState:
    return GrounderState(config, init_model(config, seed))


def _collate(examples: Sequence[GroundingExample], model: GroundingModel):
    b = len(examples)
    t = max(len(e.frames) for e in examples)
    h, w = examples[0].frames.shape[1:3]
    frames = torch.zeros(b, t, h, w, 3)
    gt = torch.full((b, t, 4), 0.5)
    visible = torch.zeros(b, t, dtype=torch.bool)
    pad = torch.ones(b, t, dtype=torch.bool)
    for i, e in enumerate(examples):
        n = len(e.frames)
        frames[i, :n] = torch.from_numpy(np.ascontiguousarray(e.frames, dtype=np.float32))
        gt[i, :n] = torch.from_numpy(np.ascontiguousarray(e.gt_boxes, dtype=np.float32))
        visible[i, :n] = torch.from_numpy(np.ascontiguousarray(e.visible, dtype=bool))
        pad[i, :n] = False
    tokens, text_pad = model.encode_text([e.prompt for e in examples])
    return frames, pad, tokens, text_pad, gt, visible


def pointer_loss(attn: torch.Tensor, centers: torch.Tensor, gt: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """Negative log of the attention mass on cells whose centers fall inside the target box."""
    if not visible.any():
        return attn.sum() * 0.0
    x1 = gt[..., 0:1] - gt[..., 2:3] / 2
    x2 = gt[..., 0:1] + gt[..., 2:3] / 2
    y1 = gt[..., 1:2] - gt[..., 3:4] / 2
    y2 = gt[..., 1:2] + gt[..., 3:4] / 2
    cx, cy = centers[:, 0], centers[:, 1]
    inside = (cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)
    mass = (attn * inside).sum(-1)[visible]
    return -torch.log(mass.clamp(min=1e-6)).mean()


def batch_loss(model: GroundingModel, examples: Sequence[GroundingExample], pointer_weight: float = 0.0):
    """Grounding loss on a padded batch; ``pointer_weight`` adds the attention-supervision term."""
    frames, pad, tokens, text_pad, gt, visible = _collate(examples, model)
    dtype = next(model.parameters()).dtype
    boxes, conf_logit, attn = model(frames.to(dtype), pad, tokens, text_pad)
    gt = gt.to(dtype)
    loss, parts = grounding_loss(boxes, torch.sigmoid(conf_logit), gt, visible, ~pad)
    if pointer_weight:
        parts["pointer"] = pointer_loss(attn, model.centers.to(dtype), gt, visible & ~pad)
        loss = loss + pointer_weight * parts["pointer"]
    return loss, parts


def predict_tubelet(
    frames: np.ndarray, prompt: Prompt | str, state: GrounderState, sampled_indices: Sequence[int] | None = None
) -> SparseTubeletPrediction:
    """Predict one normalized box and a confidence per sampled frame."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or len(frames) < 1:
        raise ValueError("expected a (T, H, W, 3) array with at least one frame")
    if len(frames) > state.config.max_sampled_frames:
        raise ValueError(
            f"{len(frames)} frames exceed the grounder capacity of {state.config.max_sampled_frames}; "
            "resample the video first"
        )
    indices = tuple(range(len(frames))) if sampled_indices is None else tuple(int(i) for i in sampled_indices)
    if len(indices) != len(frames):
        raise ValueError("sampled_indices must align with frames")
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    model = state.model
    model.eval()
    with torch.no_grad():
        tokens, text_pad = model.encode_text([text])
        pad = torch.zeros(1, len(frames), dtype=torch.bool)
        boxes, conf_logit, _ = model(torch.from_numpy(frames)[None], pad, tokens, text_pad)
    return SparseTubeletPrediction(
        boxes[0].double().numpy(), torch.sigmoid(conf_logit[0]).double().numpy(), indices
    )


def train_grounder(
    examples: Sequence[GroundingExample],
    config: GrounderTrainConfig = GrounderTrainConfig(),
    ema_enabled: bool = True,
    *,
    image_size: int | None = None,
    max_sampled_frames: int = 200,
    vocab: Sequence[str] | None = None,
    augment: Callable[[GroundingExample, np.random.Generator], GroundingExample] | None = None,
) -> tuple[GrounderState, EMAState | None]:
    """Train a fresh grounder with AdamW; EMA (if enabled) follows every optimizer step.

    ``augment`` is applied to every example after the built-in temporal
    jitter and flip, with the trainer's seeded generator.
    """
    if not examples:
        raise ValueError("empty training set")
    image_size = image_size or examples[0].frames.shape[1]
    vocab = tuple(vocab) if vocab is not None else build_vocab(e.prompt for e in examples)
    cfg = config.model_config(vocab, image_size, max_sampled_frames)
    state = new_state(cfg, config.seed)
    state.train_config = _jsonable(asdict(config))
    ema = ema_init(state.parameters(), config.ema_decay) if ema_enabled else None
    if config.epochs == 0:
        return state, ema

    model = state.model
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-len(examples) // config.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: _lr_factor(k, config.epochs * steps_per_epoch, config.warmup_steps, config.schedule)
    )
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [
                examples[i].augmented(rng, config.temporal_jitter, config.hflip, augment)
                for i in order[start : start + config.batch_size]
            ]
            loss, _ = batch_loss(model, batch, config.pointer_weight)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            state.step += 1
            if ema is not None:
                ema = ema_update(ema, state.parameters())
                assert ema.step == state.step, "EMA must see every optimizer step exactly once"
            total += loss.item() * len(batch)
            count += len(batch)
        state.history.append(total / count)
        log.info("grounder epoch %d/%d loss %.4f", epoch + 1, config.epochs, state.history[-1])
    model.eval()
    return state, ema


def _lr_factor(step: int, total: int, warmup: int, schedule: str) -> float:
    warm = min(1.0, (step + 1) / warmup) if warmup else 1.0
    if schedule == "constant":
        return warm
    if schedule == "cosine":
        return warm * 0.5 * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))
    raise ValueError(f"unknown schedule {schedule!r}")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
