"""Box regression loss: weighted L1 + generalized IoU on visible frames, plus visibility BCE."""

from __future__ import annotations

import torch
import torch.nn.functional as F

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def generalized_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of corner-format boxes (..., 4)."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return iou - (enclose - union) / enclose


def grounding_loss(
    boxes: torch.Tensor,
    confidence: torch.Tensor,
    gt_boxes: torch.Tensor,
    visible: torch.Tensor,
    valid: torch.Tensor | None = None,
    l1_weight: float = L1_WEIGHT,
    giou_weight: float = GIOU_WEIGHT,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Loss for time-aligned predictions.

    ``boxes``/``gt_boxes`` are normalized (cx, cy, w, h) of shape (..., T, 4);
    ``confidence`` holds probabilities (..., T); ``visible`` flags frames where
    the target is present; ``valid`` masks padding (defaults to all frames).
    Box terms average over visible frames, the BCE term over valid frames.
    """
    if boxes.shape != gt_boxes.shape or boxes.shape[:-1] != confidence.shape or confidence.shape != visible.shape:
        raise ValueError(
            f"misaligned prediction/target shapes: {tuple(boxes.shape)}, {tuple(confidence.shape)}, "
            f"{tuple(gt_boxes.shape)}, {tuple(visible.shape)}"
        )
    if valid is None:
        valid = torch.ones_like(visible, dtype=torch.bool)
    vis = visible.bool() & valid.bool()
    n_vis = vis.sum()
    if n_vis > 0:
        l1 = (boxes[vis] - gt_boxes[vis]).abs().sum(-1).mean()
        giou = (1.0 - generalized_iou(cxcywh_to_xyxy(boxes[vis]), cxcywh_to_xyxy(gt_boxes[vis]))).mean()
    else:
        l1 = boxes.sum() * 0.0
        giou = boxes.sum() * 0.0
    target = vis.to(confidence.dtype)
    bce = F.binary_cross_entropy(confidence[valid.bool()], target[valid.bool()])
    total = l1_weight * l1 + giou_weight * giou + bce
    return total, {"l1": l1, "giou": giou, "bce": bce}
