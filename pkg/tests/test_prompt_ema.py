import numpy as np
import pytest

from oracles import ema_closed_form
from tubeqa.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tubeqa.ema import ema_extract, ema_init, ema_update
from tubeqa.prompt import TEMPLATE, PromptError, compose, question_only


# --- prompt ------------------------------------------------------------------


def test_compose_examples():
    p = compose("Where is the cup?", "red cup", "oracle")
    assert p.text.encode() == b"Where is the cup? Track the red cup"
    assert (p.question, p.answer, p.answer_source) == ("Where is the cup?", "red cup", "oracle")
    assert compose("Q", "A").text == "Q Track the A"


@pytest.mark.parametrize("answer", ["", "   ", None])
def test_compose_rejects_empty_answer(answer):
    with pytest.raises(PromptError):
        compose("Q", answer)


def test_compose_rejects_empty_question():
    with pytest.raises(PromptError):
        compose(" ", "A")


def test_compose_is_verbatim():
    # no case folding, trimming or punctuation fixes
    assert compose("WHERE?  ", " The Cup").text == "WHERE?   Track the  The Cup"
    assert compose("q", "the cup").text == "q Track the the cup"


def test_compose_matches_template_and_is_injective():
    pairs = [("a", "b c"), ("a b", "c"), ("a", "b"), ("a?", "b")]
    texts = [compose(q, a).text for q, a in pairs]
    assert texts == [TEMPLATE.format(question=q, answer=a) for q, a in pairs]
    assert len(set(texts)) == len(texts)


def test_question_only():
    p = question_only("track the first red square that appears")
    assert p.text == "track the first red square that appears" and p.answer is None


# --- ema ---------------------------------------------------------------------


def test_init_copies():
    theta = np.array([1.0, 2.0])
    s = ema_init(theta, 0.999)
    theta[0] = 5
    assert s.average.tolist() == [1.0, 2.0] and s.step == 0
    assert ema_extract(s).tolist() == [1.0, 2.0]


@pytest.mark.parametrize("beta", [-0.1, 1.5, float("nan")])
def test_init_rejects_bad_decay(beta):
    with pytest.raises(ValueError):
        ema_init(np.zeros(2), beta)


def test_init_rejects_non_finite():
    with pytest.raises(ValueError):
        ema_init(np.array([np.inf]))


def test_update_examples():
    s = ema_update(ema_init(np.array([0.0]), 0.999), np.array([1.0]))
    assert s.average[0] == pytest.approx(0.001, abs=1e-15) and s.step == 1
    s0 = ema_update(ema_init(np.zeros(3), 0.0), np.array([1.0, 2.0, 3.0]))
    assert ema_extract(s0).tolist() == [1.0, 2.0, 3.0]


def test_update_errors():
    s = ema_init(np.zeros(3))
    with pytest.raises(ValueError):
        ema_update(s, np.zeros(4))
    with pytest.raises(ValueError):
        ema_update(s, np.array([0.0, np.nan, 0.0]))


def test_dtype_preserved():
    s = ema_init(np.zeros(4, dtype=np.float32))
    assert ema_update(s, np.ones(4)).average.dtype == np.float32


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.9, 0.999, 1.0])
def test_closed_form(beta):
    rng = np.random.default_rng(0)
    thetas = rng.normal(size=(301, 5))
    s = ema_init(thetas[0], beta)
    for th in thetas[1:]:
        s = ema_update(s, th)
    assert np.max(np.abs(s.average - ema_closed_form(thetas, beta))) <= 1e-9


def test_convex_hull_and_monotone_convergence():
    rng = np.random.default_rng(1)
    thetas = rng.normal(size=(50, 4))
    s = ema_init(thetas[0], 0.7)
    for t in range(1, 50):
        s = ema_update(s, thetas[t])
        assert np.all(s.average >= thetas[: t + 1].min(0) - 1e-12)
        assert np.all(s.average <= thetas[: t + 1].max(0) + 1e-12)
    target = np.full(4, 3.0)
    s = ema_init(np.zeros(4), 0.9)
    gaps = []
    for _ in range(30):
        s = ema_update(s, target)
        gaps.append(np.abs(s.average - target).max())
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


# --- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(2)
    s = ema_init(rng.normal(size=100).astype(np.float32))
    s = ema_update(s, rng.normal(size=100))
    save_checkpoint(tmp_path / "c", ema_extract(s), tag="ema", config_hash="h", step=s.step, meta={"a": 1})
    header, vec = load_checkpoint(tmp_path / "c")
    assert header["tag"] == "ema" and header["step"] == 1 and header["meta"] == {"a": 1}
    assert vec.tobytes() == s.average.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c", np.zeros(2), tag="best", config_hash="h", step=0)
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "c", np.zeros(8), tag="raw", config_hash="h", step=0)
    (tmp_path / "t").write_bytes((tmp_path / "c").read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="expected 8"):
        load_checkpoint(tmp_path / "t")
