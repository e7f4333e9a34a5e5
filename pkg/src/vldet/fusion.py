"""Bi-directional visual-language cross-attention and text refinement."""

from __future__ import annotations

import torch
from torch import nn

from .encoders import TransformerBlock
from .numeric import ShapeError, multi_head_attention


class CrossAttention(nn.Module):
    """One direction of VL-Fuse: queries from one modality, keys/values from the other.

    Q/K/V maps project both modalities into a shared ``attn_dim``; the output
    map brings the result back to the query modality's width.
    """

    def __init__(self, query_dim: int, context_dim: int, attn_dim: int, heads: int):
        super().__init__()
        if attn_dim % heads:
            raise ShapeError("CrossAttention", (attn_dim,), (heads,))
        self.heads = heads
        self.q = nn.Linear(query_dim, attn_dim)
        self.k = nn.Linear(context_dim, attn_dim)
        self.v = nn.Linear(context_dim, attn_dim)
        self.out = nn.Linear(attn_dim, query_dim)

    def forward(self, query, context):
        return self.out(multi_head_attention(self.q(query), self.k(context), self.v(context), self.heads))


class VLFuse(nn.Module):
    """Residual cross-attention in both directions, no normalisation.

    ``v_out = v + attn(v -> l)`` and ``l_out = l + attn(l -> v)``; both
    directions read the *input* tokens, not each other's outputs.
    """

    def __init__(self, visual_dim: int, text_dim: int, heads: int, attn_dim: int | None = None):
        super().__init__()
        attn_dim = attn_dim or text_dim
        self.visual_dim, self.text_dim = visual_dim, text_dim
        self.v2l = CrossAttention(visual_dim, text_dim, attn_dim, heads)
        self.l2v = CrossAttention(text_dim, visual_dim, attn_dim, heads)

    def forward(self, v: torch.Tensor, l: torch.Tensor):
        if v.shape[-2] == 0 or l.shape[-2] == 0:
            raise ValueError("vl_fuse needs non-empty visual and language token sets")
        if v.shape[-1] != self.visual_dim or l.shape[-1] != self.text_dim:
            raise ShapeError("vl_fuse", v.shape, l.shape)
        return v + self.v2l(v, l), l + self.l2v(l, v)


class TextRefine(TransformerBlock):
    """Single self-attention block over class tokens; no positional embedding."""

    def __init__(self, dim: int, heads: int):
        super().__init__(dim, heads, mlp_ratio=4)


def zero_fuse_(fuse: VLFuse) -> VLFuse:
    """Zero every projection in ``fuse`` in place (turns it into the identity)."""
    with torch.no_grad():
        for p in fuse.parameters():
            p.zero_()
    return fuse
