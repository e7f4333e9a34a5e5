"""Box geometry shared by the RPN, ROI head and evaluator. Boxes are (x1, y1, x2, y2) pixels."""

from __future__ import annotations

import math

import torch
from torchvision.ops import batched_nms, nms as _nms

DELTA_CLAMP = math.log(1000.0 / 16)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]).clamp_min(0) * (boxes[..., 3] - boxes[..., 1]).clamp_min(0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, (n, 4) x (m, 4) -> (n, m)."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp_min(0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(inter))


def encode_deltas(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Faster R-CNN parameterisation of ``boxes`` relative to ``anchors``."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("anchor with non-positive extent")
    bw = boxes[..., 2] - boxes[..., 0]
    bh = boxes[..., 3] - boxes[..., 1]
    if (bw <= 0).any() or (bh <= 0).any():
        raise ValueError("box with non-positive extent")
    dx = (boxes[..., 0] + 0.5 * bw - anchors[..., 0] - 0.5 * aw) / aw
    dy = (boxes[..., 1] + 0.5 * bh - anchors[..., 1] - 0.5 * ah) / ah
    return torch.stack([dx, dy, torch.log(bw / aw), torch.log(bh / ah)], dim=-1)


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("anchor with non-positive extent")
    cx = anchors[..., 0] + 0.5 * aw + deltas[..., 0] * aw
    cy = anchors[..., 1] + 0.5 * ah + deltas[..., 1] * ah
    w = aw * torch.exp(deltas[..., 2].clamp(max=DELTA_CLAMP))
    h = ah * torch.exp(deltas[..., 3].clamp(max=DELTA_CLAMP))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def clip_boxes(boxes: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    h, w = image_size
    x = boxes[..., 0::2].clamp(0, w)
    y = boxes[..., 1::2].clamp(0, h)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; returns kept indices by descending score. Suppresses IoU > threshold."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return _nms(boxes, scores.to(boxes.dtype), iou_threshold)


def class_nms(boxes, scores, classes, iou_threshold: float) -> torch.Tensor:
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return batched_nms(boxes, scores.to(boxes.dtype), classes, iou_threshold)


def smooth_l1(diff: torch.Tensor, beta: float) -> torch.Tensor:
    a = diff.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def box_regression_loss(pred, target, mask, beta: float) -> torch.Tensor:
    """Smooth-L1 mean over the masked rows x 4 coordinates; exactly 0 when the mask is empty."""
    if not mask.any():
        return pred.sum() * 0.0
    return smooth_l1(pred[mask] - target[mask], beta).mean()
