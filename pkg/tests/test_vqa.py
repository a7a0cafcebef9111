import json
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from tubeqa.synth import SceneParams, derive_qa, generate_scene, render_video
from tubeqa.vqa import (
    AnswerVocabulary,
    AnswersUnavailable,
    ExternalConnectionError,
    ExternalEndpoint,
    ExternalProtocolError,
    ExternalTimeout,
    MalformedResponse,
    VQAModelState,
    VQATrainConfig,
    answer_probabilities,
    external_answer,
    oracle_answer,
    predict_answer,
    train_vqa,
    video_features,
)


@pytest.fixture(scope="module")
def corpus():
    samples, feats, frames = [], [], {}
    p = SceneParams(max_frames=36)
    for seed in range(60):
        scene = generate_scene(p, seed)
        fr = render_video(scene)
        f = video_features(fr)
        for s in derive_qa(scene, f"v{seed}"):
            samples.append(s)
            feats.append(f)
            frames[s.video.video_id] = fr
    return samples, feats, frames


def test_vocabulary():
    v = AnswerVocabulary.closed()
    assert len(v) == 12 and "red square" in v and v.answers[v.index("blue circle")] == "blue circle"
    with pytest.raises(ValueError):
        AnswerVocabulary(("a", "a"))
    with pytest.raises(ValueError):
        AnswerVocabulary(())


def test_defaults_and_zero_epochs(corpus):
    samples, feats, _ = corpus
    cfg = VQATrainConfig()
    assert (cfg.epochs, cfg.lr) == (20, 5e-5)
    state = train_vqa(samples, feats, VQATrainConfig(epochs=0))
    assert state.history == []


def test_training_learns(corpus):
    samples, feats, frames = corpus
    state = train_vqa(samples, feats, VQATrainConfig(lr=0.5, seed=3))
    assert len(state.history) == 20 and state.history[-1] < state.history[0]
    probs = answer_probabilities(np.stack(feats), [s.question for s in samples], state)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)
    acc = np.mean([state.vocabulary.answers[k] == s.answer for k, s in zip(probs.argmax(1), samples)])
    assert acc > 1 / len(state.vocabulary)
    s = samples[0]
    r = predict_answer(frames[s.video.video_id], s.question, state)
    assert r.answer in state.vocabulary and 0 <= r.confidence <= 1 and r.source == "model"
    assert r.confidence == pytest.approx(probs[0].max())
    assert predict_answer(frames[s.video.video_id], s.question, state) == r
    # unknown words map to UNK instead of failing
    predict_answer(frames[s.video.video_id], "zzz qqq?", state)


def test_training_deterministic_and_state_round_trip(corpus):
    samples, feats, _ = corpus
    a = train_vqa(samples[:40], feats[:40], VQATrainConfig(lr=0.1, epochs=3))
    b = train_vqa(samples[:40], feats[:40], VQATrainConfig(lr=0.1, epochs=3))
    assert np.array_equal(a.parameters(), b.parameters()) and a.history == b.history
    c = VQAModelState.from_meta(json.loads(json.dumps(a.meta())), a.parameters())
    assert np.array_equal(c.parameters(), a.parameters())


def test_out_of_vocabulary_answer_rejected(corpus):
    samples, feats, _ = corpus
    from dataclasses import replace

    bad = [replace(samples[0], answer="purple hexagon")]
    with pytest.raises(ValueError, match="purple hexagon"):
        train_vqa(bad, feats[:1])


def test_empty_frames_rejected(corpus):
    samples, feats, _ = corpus
    state = train_vqa(samples, feats, VQATrainConfig(epochs=0))
    with pytest.raises(ValueError):
        predict_answer(np.zeros((0, 64, 64, 3), np.float32), "q", state)


def test_oracle(corpus):
    from dataclasses import replace

    s = corpus[0][0]
    r = oracle_answer(s)
    assert (r.answer, r.confidence, r.source) == (s.answer, 1.0, "oracle")
    with pytest.raises(AnswersUnavailable, match="answers unavailable"):
        oracle_answer(replace(s, answer=None))


# --- external client -----------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    mode = "echo"

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        mode = type(self).mode
        if mode == "slow":
            time.sleep(0.5)
        if mode == "error":
            self.send_response(500)
            self.end_headers()
            return
        if mode == "missing":
            payload = {"confidence": 0.3}
        elif mode == "notjson":
            payload = None
        else:
            payload = {"answer": "cup", "confidence": 0.7, "echo": body}
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(b"<html>" if payload is None else json.dumps(payload).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield httpd
    httpd.shutdown()
    _Handler.mode = "echo"


def _url(httpd):
    return f"http://127.0.0.1:{httpd.server_address[1]}/answer"


def test_external_echo(server):
    r = external_answer(ExternalEndpoint(_url(server)), "v1", "where is the cup?")
    assert (r.answer, r.confidence, r.source) == ("cup", 0.7, "external")


@pytest.mark.parametrize(
    "mode, exc",
    [("missing", MalformedResponse), ("notjson", MalformedResponse), ("error", ExternalProtocolError)],
)
def test_external_failures(server, mode, exc):
    _Handler.mode = mode
    with pytest.raises(exc):
        external_answer(ExternalEndpoint(_url(server)), "v1", "q")


def test_external_timeout(server):
    _Handler.mode = "slow"
    with pytest.raises(ExternalTimeout):
        external_answer(ExternalEndpoint(_url(server), timeout=0.05), "v1", "q")


def test_external_unreachable():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(ExternalConnectionError):
        external_answer(ExternalEndpoint(f"http://127.0.0.1:{port}/answer", timeout=1.0), "v1", "q")
