import numpy as np
import pytest
import torch

from gradcheck import finite_difference_check, tiny_setup
from oracles import giou_reference
from tubeqa.grounding import (
    GrounderConfig,
    GrounderTrainConfig,
    build_vocab,
    generalized_iou,
    grounding_loss,
    new_state,
    predict_tubelet,
    tokenize,
    train_grounder,
)
from tubeqa.grounding.loss import cxcywh_to_xyxy
from tubeqa.pipeline import make_example
from tubeqa.prompt import compose
from tubeqa.synth import SceneParams, derive_qa, generate_scene, render_video
from tubeqa.tubelet import BoundingBox, SamplingConfig, iou


def test_tokenize():
    assert tokenize("Where is the cup? Track the Red cup") == ["where", "is", "the", "cup", "?", "track", "the", "red", "cup"]
    v = build_vocab(["a b", "b c"])
    assert v[:2] == ("<pad>", "<unk>") and set(v[2:]) == {"a", "b", "c"}


def test_config_validation():
    with pytest.raises(ValueError):
        GrounderConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        GrounderConfig(vocab=("a", "b"))
    cfg = GrounderConfig(vocab=build_vocab(["x y"]))
    assert GrounderConfig.from_dict(cfg.to_dict()) == cfg


def test_giou_closed_form():
    # unit boxes at opposite corners of a 3x3 enclosure: IoU 0, hull 9, union 2
    a = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    b = torch.tensor([2.0, 2.0, 3.0, 3.0], dtype=torch.float64)
    assert generalized_iou(a, b).item() == pytest.approx(-7 / 9, abs=1e-15)
    assert giou_reference(a.tolist(), b.tolist()) == pytest.approx(-7 / 9, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(50):
        xs, ys = np.sort(rng.uniform(0, 1, (2, 2)), axis=1), np.sort(rng.uniform(0, 1, (2, 2)), axis=1)
        xa = [xs[0, 0], ys[0, 0], xs[0, 1], ys[0, 1]]
        xb = [xs[1, 0], ys[1, 0], xs[1, 1], ys[1, 1]]
        got = generalized_iou(torch.tensor(xa, dtype=torch.float64), torch.tensor(xb, dtype=torch.float64)).item()
        assert got == pytest.approx(giou_reference(xa, xb), abs=1e-12)


def _targets():
    gt = torch.tensor([[[0.5, 0.5, 0.2, 0.3], [0.4, 0.6, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]]], dtype=torch.float64)
    visible = torch.tensor([[True, True, False]])
    return gt, visible


def test_loss_zero_on_exact_match():
    gt, visible = _targets()
    conf = torch.where(visible, 1 - 1e-9, 1e-9).double()
    total, parts = grounding_loss(gt.clone(), conf, gt, visible)
    assert parts["l1"].item() == 0.0
    assert abs(parts["giou"].item()) <= 1e-15
    assert total.item() <= 1e-6


def test_loss_terms_and_weights():
    gt, visible = _targets()
    pred = gt.clone()
    pred[0, 0, 0] += 0.1  # shift one visible box by 0.1 in cx
    conf = torch.full((1, 3), 0.5, dtype=torch.float64)
    total, parts = grounding_loss(pred, conf, gt, visible)
    # L1 summed over coordinates, averaged over the 2 visible boxes
    assert parts["l1"].item() == pytest.approx(0.05)
    g = giou_reference(cxcywh_to_xyxy(pred[0, 0]).tolist(), cxcywh_to_xyxy(gt[0, 0]).tolist())
    assert parts["giou"].item() == pytest.approx((1 - g) / 2)
    assert parts["bce"].item() == pytest.approx(np.log(2))
    assert total.item() == pytest.approx(5 * parts["l1"].item() + 2 * parts["giou"].item() + np.log(2))


def test_loss_non_negative_and_misaligned():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = torch.from_numpy(rng.uniform(0.05, 0.5, (2, 4, 4)))
        gt = torch.from_numpy(rng.uniform(0.05, 0.5, (2, 4, 4)))
        conf = torch.from_numpy(rng.uniform(0.01, 0.99, (2, 4)))
        vis = torch.from_numpy(rng.random((2, 4)) < 0.6)
        assert grounding_loss(pred, conf, gt, vis)[0].item() >= 0
    with pytest.raises(ValueError, match="misaligned"):
        grounding_loss(torch.zeros(1, 3, 4), torch.zeros(1, 2), torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.bool))


def test_gradient_matches_finite_differences_subset():
    model, examples = tiny_setup(seed=0)
    worst, _ = finite_difference_check(model, examples, max_coords=400, seed=0)
    assert worst <= 1e-3


@pytest.fixture(scope="module")
def sample():
    scene = generate_scene(SceneParams(), 4)
    frames = render_video(scene)
    s = derive_qa(scene, "v")[0]
    return make_example(frames, s, compose(s.question, s.answer).text, SamplingConfig()), s


def test_predict_contract(sample):
    ex, _ = sample
    state = new_state(GrounderConfig(vocab=build_vocab([ex.prompt])), seed=1)
    a = predict_tubelet(ex.frames, ex.prompt, state, ex.sampled_indices)
    b = predict_tubelet(ex.frames, ex.prompt, state, ex.sampled_indices)
    assert a.boxes.shape == (len(ex.frames), 4) and a.confidence.shape == (len(ex.frames),)
    assert np.all((a.boxes >= 0) & (a.boxes <= 1)) and np.all(a.boxes[:, 2:] > 0)
    assert np.all((a.confidence >= 0) & (a.confidence <= 1))
    assert np.array_equal(a.boxes, b.boxes) and a.sampled_indices == ex.sampled_indices
    # unknown words are tolerated
    predict_tubelet(ex.frames, "track the first purple hexagon", state)


def test_predict_rejects_over_cap(sample):
    ex, _ = sample
    state = new_state(GrounderConfig(vocab=build_vocab([ex.prompt]), max_sampled_frames=4))
    with pytest.raises(ValueError, match="resample"):
        predict_tubelet(ex.frames[:5], ex.prompt, state)


def test_overfit_single_sample(sample):
    ex, s = sample
    cfg = GrounderTrainConfig(epochs=200, lr=1e-3, batch_size=1, temporal_jitter=False, hflip=False, warmup_steps=10)
    state, _ = train_grounder([ex], cfg, ema_enabled=False)
    assert state.step == 200
    pred = predict_tubelet(ex.frames, ex.prompt, state, ex.sampled_indices)
    ious = [
        iou(BoundingBox.from_cxcywh(*p, 64, 64), s.gt_tracks[0].boxes[f])
        for p, f, v in zip(pred.boxes, ex.sampled_indices, ex.visible)
        if v
    ]
    assert np.mean(ious) >= 0.9


def test_training_defaults_history_and_ema(sample):
    ex, _ = sample
    assert GrounderTrainConfig().epochs == 20 and GrounderTrainConfig().lr == 5e-5
    state, ema = train_grounder([ex], GrounderTrainConfig(epochs=0))
    assert state.history == [] and ema.step == 0
    assert np.array_equal(ema.average, state.parameters())
    with pytest.raises(ValueError):
        train_grounder([], GrounderTrainConfig())
    cfg = GrounderTrainConfig(epochs=3, lr=1e-3, batch_size=2, d_model=16, heads=2, conv_channels=(4, 8), ema_decay=0.9)
    s1, e1 = train_grounder([ex, ex], cfg)
    s2, e2 = train_grounder([ex, ex], cfg)
    assert len(s1.history) == 3 and s1.step == e1.step == 3
    assert np.array_equal(s1.parameters(), s2.parameters()) and np.array_equal(e1.average, e2.average)
    assert not np.array_equal(e1.average, s1.parameters())


def test_loss_decreases_on_small_set():
    scene_params = SceneParams()
    examples = []
    for seed in range(20):
        scene = generate_scene(scene_params, 100 + seed)
        frames = render_video(scene)
        for s in derive_qa(scene, f"v{seed}"):
            examples.append(make_example(frames, s, compose(s.question, s.answer).text, SamplingConfig()))
    cfg = GrounderTrainConfig(epochs=3, lr=3e-4, batch_size=2)
    state, _ = train_grounder(examples, cfg, ema_enabled=False)
    assert state.history[-1] < state.history[0]


def test_local_window_only_at_inference(sample):
    ex, _ = sample
    state = new_state(GrounderConfig(vocab=build_vocab([ex.prompt])), seed=2)
    model = state.model
    tokens, text_pad = model.encode_text([ex.prompt])
    frames = torch.from_numpy(ex.frames)[None]
    pad = torch.zeros(1, len(ex.frames), dtype=torch.bool)
    model.eval()
    with torch.no_grad():
        _, _, attn = model(frames, pad, tokens, text_pad)
    g = state.config.grid
    peak = attn.argmax(-1)
    ys, xs = torch.div(torch.arange(g * g), g, rounding_mode="floor"), torch.arange(g * g) % g
    far = ((ys - peak[..., None] // g).abs() > 2) | ((xs - peak[..., None] % g).abs() > 2)
    assert attn[far].abs().max().item() == 0.0
    assert torch.allclose(attn.sum(-1), torch.ones(()))
    model.train()
    with torch.no_grad():
        _, _, attn_train = model(frames, pad, tokens, text_pad)
    assert (attn_train > 0).all()


def test_stage_coupling_only_through_prompt(sample):
    """The grounder's output depends on the prompt string alone, not on stage-1 internals."""
    ex, _ = sample
    state = new_state(GrounderConfig(vocab=build_vocab([ex.prompt])), seed=3)
    a = predict_tubelet(ex.frames, compose("q", "red square"), state)
    b = predict_tubelet(ex.frames, compose("q", "red square", "oracle").text, state)
    assert np.array_equal(a.boxes, b.boxes)
