"""Image-caption contrastive loss over mini-batch groups and the weighted loss total."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch

from .numeric import pairwise_cosine

COMPONENTS = ("icl", "aal", "ral", "rpn_box", "roi_box")


def loss_icl(image_globals: torch.Tensor, captions: torch.Tensor, minibatch: int, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE computed independently inside consecutive groups of ``minibatch`` pairs.

    All 2B log terms are summed and scaled by -1/(2B), so the result is the
    mean over pairs, not a mean of per-group means.
    """
    b = image_globals.shape[0]
    if captions.shape != image_globals.shape:
        raise ValueError(f"loss_icl: paired shapes differ {tuple(image_globals.shape)} vs {tuple(captions.shape)}")
    if minibatch < 1 or b % minibatch:
        raise ValueError(f"loss_icl: minibatch {minibatch} does not divide batch {b}")
    groups = b // minibatch
    v = image_globals.reshape(groups, minibatch, -1)
    l = captions.reshape(groups, minibatch, -1)
    sims = pairwise_cosine(v, l) / tau  # sims[g, m, n] = phi(v_m, l_n)
    v2l = torch.log_softmax(sims, dim=-1).diagonal(dim1=-2, dim2=-1)
    l2v = torch.log_softmax(sims, dim=-2).diagonal(dim1=-2, dim2=-1)
    return -(v2l.sum() + l2v.sum()) / (2 * b)


@dataclass
class LossBreakdown:
    icl: float
    aal: float
    ral: float
    rpn_box: float
    roi_box: float
    total: float
    weights: dict = field(default_factory=dict)
    step: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def total_loss(components: dict, weights: dict | None = None):
    """Weighted sum of the five components; returns (total tensor, LossBreakdown).

    ``weights`` maps component name to weight, defaulting to 1.0 each.
    """
    weights = {name: float((weights or {}).get(name, 1.0)) for name in COMPONENTS}
    values = {}
    total = None
    for name in COMPONENTS:
        value = components[name]
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise FloatingPointError(f"loss component {name!r} is not finite ({scalar})")
        values[name] = scalar
        term = value * weights[name]
        total = term if total is None else total + term
    total_f = float(total.detach())
    return total, LossBreakdown(**values, total=total_f, weights=weights)


def weights_from_config(cfg) -> dict:
    return {"icl": cfg.w_icl, "aal": cfg.w_aal, "ral": cfg.w_ral, "rpn_box": cfg.w_rpnbox, "roi_box": cfg.w_roibox}
