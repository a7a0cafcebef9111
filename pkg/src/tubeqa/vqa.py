"""Stage 1: answer a question about a video.

Three answer sources share one result type:

* ``model``: a small classifier over a closed answer vocabulary, fed with
  mean-pooled color/shape statistics of the frames and a bag-of-words
  question embedding;
* ``oracle``: the ground-truth answer of the sample;
* ``external``: an HTTP service taking ``{"video_id", "question"}`` and
  returning ``{"answer", "confidence"}``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import httpx
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .synth import COLORS, SHAPES
from .tubelet import QASample

log = logging.getLogger(__name__)

UNK = "<unk>"
SOURCES = ("model", "oracle", "external")
_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z]+)?")
_PALETTE = np.array(list(COLORS.values()), dtype=np.float32)


class AnswerError(RuntimeError):
    """Base class for stage-1 failures."""


class AnswersUnavailable(AnswerError):
    pass


class ExternalAnswerError(AnswerError):
    pass


class ExternalTimeout(ExternalAnswerError):
    pass


class ExternalConnectionError(ExternalAnswerError):
    pass


class ExternalProtocolError(ExternalAnswerError):
    pass


class MalformedResponse(ExternalAnswerError):
    pass


@dataclass(frozen=True)
class AnswerVocabulary:
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("answer vocabulary is empty")
        if len(set(self.answers)) != len(self.answers):
            raise ValueError("answer vocabulary has duplicates")

    def index(self, answer: str) -> int:
        return self.answers.index(answer)

    def __len__(self):
        return len(self.answers)

    def __contains__(self, answer) -> bool:
        return answer in self.answers

    @classmethod
    def closed(cls) -> "AnswerVocabulary":
        """Every ``"<color> <shape>"`` the synthetic corpus can ask about."""
        return cls(tuple(f"{c} {s}" for c in COLORS for s in SHAPES))


@dataclass(frozen=True)
class AnswerResult:
    answer: str
    confidence: float
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown answer source {self.source!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class VQATrainConfig:
    epochs: int = 20
    lr: float = 5e-5
    seed: int = 0
    batch_size: int = 16
    hidden: int = 32


def question_tokens(question: str) -> list[str]:
    return _WORD_RE.findall(question.lower())


def video_features(frames: np.ndarray) -> np.ndarray:
    """Mean over frames of per-color area and fill statistics on 2x-downsampled frames.

    Per frame and palette color: pixel fraction, fraction of the color's
    bounding extent that it fills (square ~1, circle ~0.79, triangle ~0.5),
    and the extent's aspect; plus the overall foreground fraction.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError("expected a non-empty (T, H, W, 3) frame array")
    t, h, w, _ = frames.shape
    small = frames[:, : h - h % 2, : w - w % 2].reshape(t, h // 2, 2, w // 2, 2, 3).mean(axis=(2, 4))
    feats = np.zeros((t, 3 * len(_PALETTE) + 1), dtype=np.float32)
    npix = small.shape[1] * small.shape[2]
    for i in range(t):
        dist = np.abs(small[i][:, :, None, :] - _PALETTE[None, None]).sum(-1)
        for c in range(len(_PALETTE)):
            mask = dist[:, :, c] < 0.5
            area = mask.sum()
            if area == 0:
                continue
            ys, xs = np.nonzero(mask)
            bh, bw = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
            feats[i, 3 * c] = area / npix * 10.0
            feats[i, 3 * c + 1] = area / (bh * bw)
            feats[i, 3 * c + 2] = bw / bh
        feats[i, -1] = (small[i].sum(-1) > 0.1).mean()
    return feats.mean(axis=0)


class VQAModel(nn.Module):
    def __init__(self, num_features: int, num_words: int, num_answers: int, hidden: int):
        super().__init__()
        self.video_proj = nn.Linear(num_features, hidden)
        self.word_embed = nn.Embedding(num_words, hidden)
        self.fusion = nn.Linear(2 * hidden, hidden)
        self.head = nn.Linear(hidden, num_answers)

    def forward(self, feats, word_ids, word_mask):
        q = (self.word_embed(word_ids) * word_mask[..., None]).sum(1) / word_mask.sum(1, keepdim=True).clamp(min=1)
        v = torch.tanh(self.video_proj(feats))
        return self.head(torch.tanh(self.fusion(torch.cat([v, q], dim=-1))))


@dataclass
class VQAModelState:
    vocabulary: AnswerVocabulary
    words: tuple[str, ...]
    model: VQAModel
    config: VQATrainConfig = field(default_factory=VQATrainConfig)
    history: list[float] = field(default_factory=list)

    def parameters(self) -> np.ndarray:
        return parameters_to_vector(self.model.parameters()).detach().numpy().astype(np.float32)

    def load_parameters(self, vec: np.ndarray) -> None:
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(np.asarray(vec, dtype=np.float32).copy()), self.model.parameters())

    def meta(self) -> dict:
        return {
            "vocabulary": list(self.vocabulary.answers),
            "words": list(self.words),
            "config": asdict(self.config),
            "history": self.history,
        }

    @classmethod
    def from_meta(cls, meta: dict, params: np.ndarray) -> "VQAModelState":
        state = new_vqa_state(
            AnswerVocabulary(tuple(meta["vocabulary"])), tuple(meta["words"]), VQATrainConfig(**meta["config"])
        )
        state.history = list(meta["history"])
        state.load_parameters(params)
        return state

    def _encode_questions(self, questions: Sequence[str]):
        index = {w: i for i, w in enumerate(self.words)}
        rows = [[index.get(w, 0) for w in question_tokens(q)] or [0] for q in questions]
        n = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), n, dtype=torch.long)
        mask = torch.zeros(len(rows), n)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = 1.0
        return ids, mask


def new_vqa_state(vocabulary: AnswerVocabulary, words: Sequence[str], config: VQATrainConfig) -> VQAModelState:
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = VQAModel(3 * len(_PALETTE) + 1, len(words), len(vocabulary), config.hidden)
    return VQAModelState(vocabulary, tuple(words), model, config)


def answer_probabilities(feats: np.ndarray, questions: Sequence[str], state: VQAModelState) -> np.ndarray:
    state.model.eval()
    with torch.no_grad():
        ids, mask = state._encode_questions(questions)
        logits = state.model(torch.from_numpy(np.atleast_2d(feats).astype(np.float32)), ids, mask)
        return torch.softmax(logits.double(), dim=-1).numpy()


def predict_answer(frames: np.ndarray, question: str, state: VQAModelState) -> AnswerResult:
    if frames is None or len(frames) == 0:
        raise ValueError("predict_answer needs at least one frame")
    probs = answer_probabilities(video_features(frames), [question], state)[0]
    k = int(np.argmax(probs))
    return AnswerResult(state.vocabulary.answers[k], float(probs[k]), "model")


def oracle_answer(sample: QASample) -> AnswerResult:
    if sample.answer is None:
        raise AnswersUnavailable(f"{sample.video.video_id}: answers unavailable for oracle mode")
    return AnswerResult(sample.answer, 1.0, "oracle")


def train_vqa(
    samples: Sequence[QASample],
    features: Sequence[np.ndarray],
    config: VQATrainConfig = VQATrainConfig(),
    vocabulary: AnswerVocabulary | None = None,
) -> VQAModelState:
    """Fit the answer classifier with plain minibatch SGD.

    ``features[i]`` is ``video_features`` of the video of ``samples[i]``.
    """
    vocabulary = vocabulary or AnswerVocabulary.closed()
    bad = [(s.video.video_id, s.question, s.answer) for s in samples if s.answer not in vocabulary]
    if bad:
        raise ValueError(f"answers outside the vocabulary: {bad[:10]}")
    words = (UNK, *sorted({w for s in samples for w in question_tokens(s.question)}))
    state = new_vqa_state(vocabulary, words, config)
    if config.epochs == 0 or not samples:
        return state
    feats = torch.from_numpy(np.stack(features).astype(np.float32))
    ids, mask = state._encode_questions([s.question for s in samples])
    target = torch.tensor([vocabulary.index(s.answer) for s in samples])
    opt = torch.optim.SGD(state.model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    state.model.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(rng.permutation(len(samples)))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            loss = F.cross_entropy(state.model(feats[b], ids[b], mask[b]), target[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        state.history.append(total / len(samples))
        log.info("vqa epoch %d/%d loss %.4f", epoch + 1, config.epochs, state.history[-1])
    state.model.eval()
    return state


@dataclass(frozen=True)
class ExternalEndpoint:
    url: str
    timeout: float = 10.0


def external_answer(endpoint: ExternalEndpoint, video_id: str, question: str, client: httpx.Client | None = None) -> AnswerResult:
    """Ask a remote answering service; every failure raises, nothing falls back."""
    payload = {"video_id": video_id, "question": question}
    try:
        if client is None:
            resp = httpx.post(endpoint.url, json=payload, timeout=endpoint.timeout)
        else:
            resp = client.post(endpoint.url, json=payload, timeout=endpoint.timeout)
    except httpx.TimeoutException as exc:
        raise ExternalTimeout(f"{endpoint.url}: timed out after {endpoint.timeout}s") from exc
    except httpx.TransportError as exc:
        raise ExternalConnectionError(f"{endpoint.url}: {exc}") from exc
    if not resp.is_success:
        raise ExternalProtocolError(f"{endpoint.url}: HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise MalformedResponse(f"{endpoint.url}: response is not JSON") from exc
    if not isinstance(body, dict) or not isinstance(body.get("answer"), str):
        raise MalformedResponse(f"{endpoint.url}: response lacks a string 'answer' field")
    conf = body.get("confidence", 1.0)
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
        raise MalformedResponse(f"{endpoint.url}: bad confidence {conf!r}")
    return AnswerResult(body["answer"], float(conf), "external")
