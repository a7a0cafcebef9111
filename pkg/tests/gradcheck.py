"""Central finite-difference check of the grounding loss on a tiny float64 model."""

from __future__ import annotations

import numpy as np
import torch

from tubeqa.grounding import GrounderConfig, GroundingExample, build_vocab
from tubeqa.grounding.model import init_model
from tubeqa.grounding.stage import batch_loss
from tubeqa.synth import SceneParams, derive_qa, generate_scene, render_video
from tubeqa.tubelet import SamplingConfig, sample_frame_indices

STEP = 1e-6
# denominators below this are finite-difference rounding noise (about eps * loss / STEP ~ 1e-9)
FLOOR = 1e-5


def _example(seed: int) -> GroundingExample:
    p = SceneParams(width=16, height=16, min_half_size=2, max_half_size=4, min_frames=12, max_frames=18, max_objects=2)
    scene = generate_scene(p, seed)
    frames = render_video(scene)
    s = derive_qa(scene)[0]
    idx = sample_frame_indices(scene.num_frames, scene.fps, SamplingConfig())
    boxes = s.gt_tracks[0].boxes
    gt = np.array([boxes[j].to_cxcywh(16, 16) if j in boxes else (0.5, 0.5, 0.1, 0.1) for j in idx], np.float32)
    return GroundingExample(frames[idx], f"{s.question} Track the {s.answer}", gt, np.array([j in boxes for j in idx]))


def tiny_setup(seed: int, d_model: int = 8):
    """Model with d_model 8 in float64 plus a padded batch of two examples."""
    examples = [_example(10 * seed), _example(10 * seed + 1)]
    cfg = GrounderConfig(
        vocab=build_vocab(e.prompt for e in examples),
        image_size=16,
        conv_channels=(4, 8),
        d_model=d_model,
        heads=2,
        encoder_layers=1,
        decoder_layers=1,
        ffn_dim=2 * d_model,
        max_sampled_frames=8,
    )
    model = init_model(cfg, seed).double()
    model.train()
    return model, examples


def finite_difference_check(model, examples, max_coords: int | None = None, seed: int = 0):
    """Worst elementwise relative error |a - n| / max(|a|, |n|, FLOOR) and the norm-wise error."""
    params = list(model.parameters())
    loss, _ = batch_loss(model, examples)
    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)]).numpy()
    coords = [(pi, i) for pi, p in enumerate(params) for i in range(p.numel())]
    if max_coords is not None and max_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    offsets = np.cumsum([0] + [p.numel() for p in params])
    a = np.empty(len(coords))
    n = np.empty(len(coords))
    with torch.no_grad():
        for k, (pi, i) in enumerate(coords):
            flat = params[pi].view(-1)
            orig = flat[i].item()
            flat[i] = orig + STEP
            up = batch_loss(model, examples)[0].item()
            flat[i] = orig - STEP
            down = batch_loss(model, examples)[0].item()
            flat[i] = orig
            n[k] = (up - down) / (2 * STEP)
            a[k] = analytic[offsets[pi] + i]
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    norm = np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-300)
    return float(rel.max()), float(norm)
