"""SigRPN: text-aware proposals scored by anchor-text contrast."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .boxes import box_iou, clip_boxes, decode_deltas, nms, box_regression_loss
from .config import ModelConfig
from .fusion import TextRefine, VLFuse
from .numeric import pairwise_cosine
from .pyramid import PyramidFeatures, pyramid_shapes, pyramid_strides

ASPECT_RATIOS = (0.5, 1.0, 2.0)
RPN_BOX_BETA = 1.0 / 9.0

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorSet:
    boxes: torch.Tensor  # (K, 4)
    level: torch.Tensor  # (K,) 0-based pyramid level
    A: int

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class RpnOutput:
    embeddings: torch.Tensor  # (B, K, C_l) objectness embeddings
    deltas: torch.Tensor  # (B, K, 4)
    l_cls_rpn: torch.Tensor  # (B, N, C_l)


@dataclass
class Proposal:
    box: tuple[float, float, float, float]
    score: float
    level: int


@dataclass
class Proposals:
    boxes: torch.Tensor  # (P, 4)
    scores: torch.Tensor  # (P,) sigmoid objectness
    levels: torch.Tensor  # (P,)

    def to_list(self) -> list[Proposal]:
        return [
            Proposal(tuple(b), s, lv)
            for b, s, lv in zip(self.boxes.tolist(), self.scores.tolist(), self.levels.tolist())
        ]


def level_anchors(h: int, w: int, stride: float, ratios=ASPECT_RATIOS) -> torch.Tensor:
    """Anchors for one level in (row, col, ratio) order, side sqrt(area) = 4 * stride."""
    side = 4.0 * stride
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    cx = ((xs + 0.5) * stride).reshape(-1, 1)
    cy = ((ys + 0.5) * stride).reshape(-1, 1)
    r = torch.tensor(ratios, dtype=torch.float64)
    aw = (side / r.sqrt()).reshape(1, -1)
    ah = (side * r.sqrt()).reshape(1, -1)
    boxes = torch.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], dim=-1)
    return boxes.reshape(-1, 4)


def generate_anchors(cfg: ModelConfig, image_size: tuple[int, int] | None = None) -> AnchorSet:
    height, width = image_size or cfg.image_size
    if cfg.anchors_per_location != len(ASPECT_RATIOS):
        raise ValueError("anchors_per_location must be 3 (ratios 0.5, 1, 2)")
    shapes = pyramid_shapes(height, width, cfg.patch_size)
    strides = pyramid_strides(cfg.patch_size)
    boxes, levels = [], []
    for i, ((h, w), s) in enumerate(zip(shapes, strides)):
        b = level_anchors(h, w, s)
        boxes.append(b)
        levels.append(torch.full((b.shape[0],), i, dtype=torch.long))
    return AnchorSet(torch.cat(boxes).float(), torch.cat(levels), len(ASPECT_RATIOS))


class SigRPN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, A = cfg.c_pyr, cfg.anchors_per_location
        self.fuse = VLFuse(c, cfg.c_l, cfg.heads)
        self.refine = TextRefine(cfg.c_l, cfg.heads)
        self.trunk = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.GELU(), nn.Conv2d(c, c, 3, padding=1), nn.GELU()
        )
        self.obj_head = nn.Conv2d(c, A * cfg.c_l, 1)  # V2L1
        self.delta_head = nn.Conv2d(c, A * 4, 1)
        nn.init.normal_(self.delta_head.weight, std=1e-3)
        nn.init.zeros_(self.delta_head.bias)

    def forward(self, pyr: PyramidFeatures, l_pub: torch.Tensor) -> RpnOutput:
        tokens = pyr.flatten()
        v_f, l_f = self.fuse(tokens, l_pub)
        l_rpn = self.refine(l_f)
        emb, deltas = [], []
        A, c_l = self.cfg.anchors_per_location, self.cfg.c_l
        for fmap in pyr.unflatten(v_f):
            x = self.trunk(fmap)
            b, _, h, w = x.shape
            # (B, A*C, h, w) -> (B, h, w, A, C) -> (B, h*w*A, C), matching anchor order
            emb.append(self.obj_head(x).permute(0, 2, 3, 1).reshape(b, h * w * A, c_l))
            deltas.append(self.delta_head(x).permute(0, 2, 3, 1).reshape(b, h * w * A, 4))
        return RpnOutput(torch.cat(emb, 1), torch.cat(deltas, 1), l_rpn)


def objectness_score(embeddings: torch.Tensor, text: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean foreground similarity minus background similarity, over ``tau``.

    embeddings (..., K, C), text (..., N, C) with row 0 the background -> (..., K).
    """
    if text.shape[-2] < 2:
        raise ValueError("objectness needs a background row plus at least one class")
    sims = pairwise_cosine(embeddings, text)
    return (sims[..., 1:].mean(-1) - sims[..., 0]) / tau


def match_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    cfg: ModelConfig,
    generator: torch.Generator | None = None,
    sample: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """IoU-based anchor labels (1 / 0 / -1) and the matched gt index per anchor."""
    k = anchors.shape[0]
    labels = torch.full((k,), IGNORE, dtype=torch.long)
    matched = torch.zeros(k, dtype=torch.long)
    if gt_boxes.numel() == 0:
        labels[:] = NEGATIVE
    else:
        iou = box_iou(anchors, gt_boxes.to(anchors.dtype))
        best, matched = iou.max(dim=1)
        labels[best <= cfg.rpn_neg_iou] = NEGATIVE
        labels[best >= cfg.rpn_pos_iou] = POSITIVE
        per_gt = iou.max(dim=0).values
        for g in range(gt_boxes.shape[0]):
            if per_gt[g] <= 0:
                continue
            hits = (iou[:, g] == per_gt[g]).nonzero().flatten()
            labels[hits] = POSITIVE
            matched[hits] = g
    if sample:
        labels = subsample(labels, cfg.rpn_batch, cfg.rpn_pos_fraction, generator)
    return labels, matched


def subsample(labels: torch.Tensor, batch: int, pos_fraction: float, generator=None) -> torch.Tensor:
    pos = (labels == POSITIVE).nonzero().flatten()
    neg = (labels == NEGATIVE).nonzero().flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    out = torch.full_like(labels, IGNORE)
    out[pos] = POSITIVE
    out[neg] = NEGATIVE
    return out


def loss_aal(embeddings: torch.Tensor, text: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Binary cross-entropy on sigmoid(objectness score) over non-ignored anchors."""
    keep = labels >= 0
    if not keep.any():
        raise ValueError("loss_aal: every anchor is ignored")
    scores = objectness_score(embeddings, text, tau)
    return F.binary_cross_entropy_with_logits(scores[keep], labels[keep].to(scores.dtype))


def rpn_box_loss(pred: torch.Tensor, target: torch.Tensor, labels: torch.Tensor, beta: float = RPN_BOX_BETA):
    """Smooth-L1 averaged over positive anchors x 4 coordinates; exactly 0 with no positives."""
    return box_regression_loss(pred, target, labels == POSITIVE, beta)


def select_proposals(
    scores: torch.Tensor,
    deltas: torch.Tensor,
    anchors: AnchorSet,
    cfg: ModelConfig,
    training: bool,
    image_size: tuple[int, int] | None = None,
) -> Proposals:
    """Per-level top-k, decode, clip, drop sub-pixel boxes, joint NMS, keep top-k.

    ``scores`` are raw objectness scores (K,), ``deltas`` (K, 4), for one image.
    """
    image_size = image_size or cfg.image_size
    picked = []
    for lv in range(int(anchors.level.max()) + 1):
        idx = (anchors.level == lv).nonzero().flatten()
        k = min(cfg.rpn_pre_topk, idx.numel())
        top = scores[idx].topk(k).indices
        picked.append(idx[top])
    idx = torch.cat(picked)
    boxes = clip_boxes(decode_deltas(anchors.boxes[idx].to(deltas.dtype), deltas[idx]), image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = (wh >= 1).all(dim=1)
    idx, boxes = idx[ok], boxes[ok]
    probs = torch.sigmoid(scores[idx])
    keep = nms(boxes, probs, cfg.rpn_nms_iou)
    keep = keep[: cfg.rpn_post_topk_train if training else cfg.rpn_post_topk_test]
    return Proposals(boxes[keep], probs[keep], anchors.level[idx[keep]])


__all__ = [
    "AnchorSet", "RpnOutput", "Proposal", "Proposals", "SigRPN", "generate_anchors",
    "level_anchors", "objectness_score", "match_anchors", "subsample", "loss_aal",
    "rpn_box_loss", "select_proposals", "POSITIVE", "NEGATIVE", "IGNORE",
]
