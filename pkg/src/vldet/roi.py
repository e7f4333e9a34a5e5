"""Region features, region-text classification and class-agnostic box refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .boxes import box_iou, box_regression_loss, class_nms, clip_boxes, decode_deltas, encode_deltas
from .config import ModelConfig
from .numeric import normalize
from .pyramid import PyramidFeatures

POOL = 7
SAMPLING = 2  # 2x2 bilinear samples per output cell


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int  # prompt row, 1..N-1
    score: float


def assign_levels(boxes: torch.Tensor, patch_size: int) -> torch.Tensor:
    """1-based pyramid level per box; a box of side 4p maps to level 3 (the x1 map)."""
    side = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp_min(1e-12).sqrt()
    k = 3 + torch.floor(torch.log2(side / (4 * patch_size)))
    return k.clamp(1, 5).long()


def _axis_weights(start: torch.Tensor, length: torch.Tensor, extent: int, bins: int) -> torch.Tensor:
    """Per-axis bilinear weights, (R, bins, extent), averaged over SAMPLING samples per bin.

    Samples outside [-1, extent] contribute nothing; samples past the last
    cell snap to it, as in the usual aligned RoIAlign kernel.
    """
    r = start.shape[0]
    step = length / bins
    offs = (torch.arange(bins, dtype=start.dtype).view(1, bins, 1)
            + (torch.arange(SAMPLING, dtype=start.dtype).view(1, 1, SAMPLING) + 0.5) / SAMPLING)
    pos = start.view(r, 1, 1) + offs * step.view(r, 1, 1)  # (R, bins, S)
    valid = (pos >= -1.0) & (pos <= extent)
    pos = pos.clamp_min(0.0)
    low = pos.floor().long()
    at_edge = low >= extent - 1
    low = torch.where(at_edge, torch.full_like(low, extent - 1), low)
    high = torch.where(at_edge, low, low + 1)
    pos = torch.where(at_edge, low.to(pos.dtype), pos)
    frac = pos - low.to(pos.dtype)
    scale = valid.to(pos.dtype) / SAMPLING
    w = torch.zeros(r, bins, extent, dtype=start.dtype)
    w.scatter_add_(2, low, (1.0 - frac) * scale)
    w.scatter_add_(2, high, frac * scale)
    return w


def roi_align(features: torch.Tensor, boxes: torch.Tensor, stride: float, batch_index=None, output_size: int = POOL):
    """Bilinear region pooling over one map.

    features (B, C, h, w); boxes (R, 4) in image pixels; ``batch_index`` (R,)
    picks the image for each box (defaults to image 0). Each output cell is
    the mean of 2x2 bilinear samples. Returns (R, C, s, s).

    The sample grid is a Cartesian product, so pooling factors into one
    weight matrix per axis and reduces to two contractions.
    """
    if boxes.numel() and ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ValueError("roi_align: degenerate box")
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if batch_index is None:
        batch_index = torch.zeros(boxes.shape[0], dtype=torch.long)
    _, c, h, w = features.shape
    b = boxes.detach().to(features.dtype) / stride - 0.5
    wy = _axis_weights(b[:, 1], b[:, 3] - b[:, 1], h, output_size)
    wx = _axis_weights(b[:, 0], b[:, 2] - b[:, 0], w, output_size)
    out = features.new_zeros(boxes.shape[0], c, output_size, output_size)
    for img in batch_index.unique().tolist():
        sel = (batch_index == img).nonzero().flatten()
        rows = torch.einsum("riy,cyx->rcix", wy[sel], features[img])
        out[sel] = torch.einsum("rcix,rjx->rcij", rows, wx[sel])
    return out


def multilevel_roi_align(pyr: PyramidFeatures, boxes: torch.Tensor, batch_index: torch.Tensor, patch_size: int):
    """Pool each box from the level chosen by :func:`assign_levels`, preserving box order."""
    levels = assign_levels(boxes, patch_size) - 1
    ref = pyr.levels[0]
    out = ref.new_zeros(boxes.shape[0], ref.shape[1], POOL, POOL)
    for lv, fmap in enumerate(pyr.levels):
        sel = (levels == lv).nonzero().flatten()
        if sel.numel():
            out[sel] = roi_align(fmap, boxes[sel], pyr.strides[lv], batch_index[sel])
    return out


class ROIHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.c_pyr * POOL * POOL, cfg.roi_hidden)
        self.fc2 = nn.Linear(cfg.roi_hidden, cfg.roi_hidden)
        self.v2l = nn.Linear(cfg.roi_hidden, cfg.c_l)  # V2L2
        self.bbox = nn.Linear(cfg.roi_hidden, 4)
        nn.init.normal_(self.bbox.weight, std=1e-3)
        nn.init.zeros_(self.bbox.bias)

    def forward(self, patches: torch.Tensor):
        """(R, C, 7, 7) -> region embeddings (R, C_l), class-agnostic deltas (R, 4)."""
        x = F.gelu(self.fc1(patches.flatten(1)))
        x = F.gelu(self.fc2(x))
        return self.v2l(x), self.bbox(x)


def region_logits(region_emb: torch.Tensor, text: torch.Tensor, tau: float, batch_index=None) -> torch.Tensor:
    """Cosine similarity of each region with every text row, over ``tau``.

    text is (N, C) shared by all regions, or (B, N, C) selected per region by
    ``batch_index``.
    """
    r = normalize(region_emb)
    if text.dim() == 2:
        return r @ normalize(text).T / tau
    t = normalize(text)[batch_index]  # (R, N, C)
    return torch.einsum("rc,rnc->rn", r, t) / tau


def loss_ral(region_emb, text, targets, tau: float, batch_index=None) -> torch.Tensor:
    """Softmax cross-entropy over all N text rows (background included)."""
    if region_emb.shape[0] == 0:
        raise ValueError("loss_ral: no regions")
    return F.cross_entropy(region_logits(region_emb, text, tau, batch_index), targets)


def roi_box_loss(pred, target, fg_mask, beta: float = 1.0 / 9.0):
    return box_regression_loss(pred, target, fg_mask, beta)


def sample_rois(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_rows: torch.Tensor,
                cfg: ModelConfig, generator=None):
    """Pick training regions from proposals plus ground truth.

    Returns boxes (R, 4), class targets (R,) with 0 for background, regression
    targets (R, 4) and a foreground mask.
    """
    boxes = torch.cat([proposals, gt_boxes.to(proposals.dtype)]) if gt_boxes.numel() else proposals
    n = boxes.shape[0]
    if gt_boxes.numel():
        iou = box_iou(boxes, gt_boxes.to(boxes.dtype))
        best, matched = iou.max(dim=1)
        fg = best >= cfg.roi_fg_iou
    else:
        matched = torch.zeros(n, dtype=torch.long)
        fg = torch.zeros(n, dtype=torch.bool)
    fg_idx = fg.nonzero().flatten()
    bg_idx = (~fg).nonzero().flatten()
    n_fg = min(fg_idx.numel(), int(cfg.roi_batch * cfg.roi_fg_fraction))
    n_bg = min(bg_idx.numel(), cfg.roi_batch - n_fg)
    fg_idx = fg_idx[torch.randperm(fg_idx.numel(), generator=generator)[:n_fg]]
    bg_idx = bg_idx[torch.randperm(bg_idx.numel(), generator=generator)[:n_bg]]
    keep = torch.cat([fg_idx, bg_idx])
    sel = boxes[keep]
    targets = torch.zeros(keep.numel(), dtype=torch.long)
    reg = torch.zeros(keep.numel(), 4, dtype=boxes.dtype)
    fg_mask = torch.zeros(keep.numel(), dtype=torch.bool)
    fg_mask[:n_fg] = True
    if n_fg:
        g = matched[fg_idx]
        targets[:n_fg] = gt_rows[g]
        reg[:n_fg] = encode_deltas(gt_boxes[g].to(boxes.dtype), sel[:n_fg])
    return sel, targets, reg, fg_mask


def postprocess_detections(region_emb, box_deltas, proposals, text, cfg: ModelConfig,
                           image_size=None) -> list[Detection]:
    """Turn one image's region outputs into final detections.

    text is (N, C) with row 0 the background. A region yields a detection
    only when a foreground row wins the full softmax and its probability
    reaches ``score_threshold``.
    """
    if region_emb.shape[0] == 0:
        return []
    image_size = image_size or cfg.image_size
    probs = torch.softmax(region_logits(region_emb, text, cfg.tau_ral), dim=-1)
    fg_score, fg_cls = probs[:, 1:].max(dim=1)
    fg_cls = fg_cls + 1
    keep = (probs.argmax(dim=1) != 0) & (fg_score >= cfg.score_threshold)
    boxes = clip_boxes(decode_deltas(proposals.to(box_deltas.dtype), box_deltas), image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    keep &= (wh > 0).all(dim=1)
    boxes, fg_score, fg_cls = boxes[keep], fg_score[keep], fg_cls[keep]
    order = class_nms(boxes, fg_score, fg_cls, cfg.det_nms_iou)[: cfg.max_detections]
    return [
        Detection(tuple(b), int(c), float(s))
        for b, c, s in zip(boxes[order].tolist(), fg_cls[order].tolist(), fg_score[order].tolist())
    ]


__all__ = [
    "Detection", "ROIHead", "assign_levels", "roi_align", "multilevel_roi_align", "region_logits",
    "loss_ral", "roi_box_loss", "sample_rois", "postprocess_detections",
]
