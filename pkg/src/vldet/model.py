"""The assembled detector: encoders -> VL-PUB -> SigRPN -> proposals -> ROI head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .boxes import encode_deltas
from .config import ModelConfig
from .encoders import (BACKGROUND, GlobalProjection, ImageEncoder, TextBank, TextEncoder, encode_texts,
                       tokenize, tokenize_class_names)
from .objective import loss_icl, weights_from_config
from .pyramid import VLPUB
from .roi import ROIHead, Detection, loss_ral, multilevel_roi_align, postprocess_detections, roi_box_loss, sample_rois
from .rpn import SigRPN, generate_anchors, loss_aal, match_anchors, objectness_score, rpn_box_loss, select_proposals

# submodule prefixes used by freeze policies and learning-rate groups
TEXT_ENCODER = "encoders.text"
IMAGE_ENCODER = "encoders.image"
V2L1 = "rpn.obj_head"
V2L2 = "roi.v2l"


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W)
    captions: list[str] | None
    gt_boxes: list[torch.Tensor]  # per image (G, 4)
    gt_rows: list[torch.Tensor]  # per image (G,), rows of the prompt list

    def __len__(self):
        return self.images.shape[0]


def make_batch(scenes, prompt_rows: dict[int, int], with_captions: bool = True) -> Batch:
    """Collate SceneRecords; ``prompt_rows`` maps dataset class id -> prompt row."""
    images = torch.from_numpy(np.stack([s.image for s in scenes])).permute(0, 3, 1, 2).contiguous()
    boxes, rows = [], []
    for s in scenes:
        keep = [i for i, c in enumerate(s.class_ids) if c in prompt_rows]
        boxes.append(torch.tensor([s.boxes[i] for i in keep], dtype=torch.float32).reshape(-1, 4))
        rows.append(torch.tensor([prompt_rows[s.class_ids[i]] for i in keep], dtype=torch.long))
    return Batch(images, [s.caption for s in scenes] if with_captions else None, boxes, rows)


def registry_name(torch_name: str) -> str:
    return torch_name.replace(".", "/")


class VLDet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleDict({
            "image": ImageEncoder(cfg),
            "text": TextEncoder(cfg),
            "global_proj": GlobalProjection(cfg),
        })
        self.pyramid = VLPUB(cfg)
        self.rpn = SigRPN(cfg)
        self.roi = ROIHead(cfg)
        self.anchors = generate_anchors(cfg)

    # -- registry ----------------------------------------------------------

    def registry(self) -> dict[str, nn.Parameter]:
        """Every parameter under its path-like name, e.g. ``encoders/text/blocks/0/attn/qkv/weight``."""
        return {registry_name(n): p for n, p in self.named_parameters()}

    # -- text --------------------------------------------------------------

    def encode_prompts(self, class_names: Sequence[str]) -> torch.Tensor:
        """Background row followed by one row per class name, (N, C_l)."""
        names = [BACKGROUND, *class_names]
        return encode_texts(self.encoders["text"], tokenize_class_names(names, self.cfg))

    def encode_captions(self, captions: Sequence[str]) -> torch.Tensor:
        return encode_texts(self.encoders["text"], [tokenize(c, "caption", self.cfg) for c in captions])

    # -- forward -----------------------------------------------------------

    def forward_features(self, images: torch.Tensor, l_cls: torch.Tensor, captions: Sequence[str] | None = None):
        v0 = self.encoders["image"](images)
        l_cap = self.encode_captions(captions) if captions is not None else None
        pyr, l_pub = self.pyramid(v0, l_cls, l_cap)
        rpn_out = self.rpn(pyr, l_pub)
        bank = TextBank(l_cls, l_cap, l_pub, rpn_out.l_cls_rpn)
        return v0, pyr, rpn_out, bank

    def training_losses(self, batch: Batch, class_names: Sequence[str], generator: torch.Generator | None = None):
        """All five loss components for one batch, as a dict of scalar tensors."""
        cfg = self.cfg
        dtype = self.encoders["global_proj"].proj.weight.dtype
        images = batch.images.to(dtype)
        l_cls = self.encode_prompts(class_names)
        v0, pyr, rpn_out, bank = self.forward_features(images, l_cls, batch.captions)

        losses = {}
        if bank.l_cap is not None:
            g = self.encoders["global_proj"](v0)
            losses["icl"] = loss_icl(g, bank.l_cap, cfg.minibatch, cfg.tau_icl)
        else:
            losses["icl"] = images.new_zeros(())

        anchors = self.anchors.boxes.to(dtype)
        labels, targets = [], []
        for gt in batch.gt_boxes:
            lab, matched = match_anchors(anchors, gt.to(dtype), cfg, generator)
            tgt = torch.zeros_like(anchors)
            pos = lab == 1
            if pos.any():
                tgt[pos] = encode_deltas(gt.to(dtype)[matched[pos]], anchors[pos])
            labels.append(lab)
            targets.append(tgt)
        labels = torch.stack(labels)
        targets = torch.stack(targets)
        losses["aal"] = loss_aal(rpn_out.embeddings, bank.l_cls_rpn, labels, cfg.tau_aal)
        losses["rpn_box"] = rpn_box_loss(rpn_out.deltas, targets, labels)

        with torch.no_grad():
            scores = objectness_score(rpn_out.embeddings, bank.l_cls_rpn, cfg.tau_aal)
        roi_boxes, roi_cls, roi_reg, roi_fg, roi_img = [], [], [], [], []
        for b in range(len(batch)):
            props = select_proposals(scores[b], rpn_out.deltas[b].detach(), self.anchors, cfg, training=True)
            sel, cls_t, reg_t, fg = sample_rois(props.boxes, batch.gt_boxes[b].to(dtype), batch.gt_rows[b], cfg,
                                                generator)
            roi_boxes.append(sel)
            roi_cls.append(cls_t)
            roi_reg.append(reg_t)
            roi_fg.append(fg)
            roi_img.append(torch.full((sel.shape[0],), b, dtype=torch.long))
        boxes = torch.cat(roi_boxes)
        img_idx = torch.cat(roi_img)
        patches = multilevel_roi_align(pyr, boxes, img_idx, cfg.patch_size)
        region_emb, box_deltas = self.roi(patches)
        losses["ral"] = loss_ral(region_emb, bank.l_cls_rpn, torch.cat(roi_cls), cfg.tau_ral, img_idx)
        losses["roi_box"] = roi_box_loss(box_deltas, torch.cat(roi_reg), torch.cat(roi_fg))
        return losses

    @torch.no_grad()
    def detect(self, image: torch.Tensor, l_cls: torch.Tensor) -> list[Detection]:
        """Inference on one (3, H, W) image against prompt embeddings (N, C_l); no caption branch."""
        cfg = self.cfg
        dtype = l_cls.dtype
        _, pyr, rpn_out, bank = self.forward_features(image.unsqueeze(0).to(dtype), l_cls, None)
        scores = objectness_score(rpn_out.embeddings[0], bank.l_cls_rpn[0], cfg.tau_aal)
        props = select_proposals(scores, rpn_out.deltas[0], self.anchors, cfg, training=False)
        if props.boxes.shape[0] == 0:
            return []
        patches = multilevel_roi_align(pyr, props.boxes, torch.zeros(props.boxes.shape[0], dtype=torch.long),
                                       cfg.patch_size)
        region_emb, box_deltas = self.roi(patches)
        return postprocess_detections(region_emb, box_deltas, props.boxes, bank.l_cls_rpn[0], cfg)

    def bind_prompts(self, class_names: Sequence[str]):
        """Embed ``class_names`` once and return ``scene -> detections`` for evaluation."""
        with torch.no_grad():
            l_cls = self.encode_prompts(class_names)

        def detector(scene) -> list[Detection]:
            image = torch.from_numpy(np.ascontiguousarray(scene.image)).permute(2, 0, 1)
            return self.detect(image, l_cls)

        return detector

    def loss_weights(self) -> dict:
        return weights_from_config(self.cfg)
