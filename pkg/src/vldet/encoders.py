"""Toy image/text encoders standing in for pre-aligned CLIP towers."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .config import ModelConfig
from .numeric import ShapeError, multi_head_attention

PAD_ID = 0
BACKGROUND = "background"
_WORD = re.compile(r"[a-z0-9]+")


@dataclass
class TokenSequence:
    ids: list[int]
    pad_mask: list[bool]  # True where padded

    def __len__(self):
        return len(self.ids)


@dataclass
class TextBank:
    """Text embeddings at each stage; row 0 is always the background prompt.

    ``l_cls`` is (N, C_l). ``l_cap`` is (B, C_l) in training mode and ``None``
    at inference. The fused stages are per image: (B, N, C_l).
    """

    l_cls: torch.Tensor
    l_cap: torch.Tensor | None = None
    l_cls_pub: torch.Tensor | None = None
    l_cls_rpn: torch.Tensor | None = None


def word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("ascii"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, mode: str, config: ModelConfig, pad_to: int | None = None) -> TokenSequence:
    """Hash each word to an id in ``1..vocab_size-1``; 0 is padding.

    Captions are truncated/padded to ``max_caption_tokens``; class names are
    padded to ``pad_to`` (the longest name in the vocabulary) when given.
    """
    words = split_words(text)
    if not words:
        raise ValueError("cannot tokenize empty text")
    ids = [word_id(w, config.vocab_size) for w in words]
    if mode == "caption":
        length = config.max_caption_tokens
    elif mode == "class_name":
        length = max(pad_to or 0, len(ids))
    else:
        raise ValueError(f"unknown tokenize mode {mode!r}")
    ids = ids[:length]
    n = len(ids)
    return TokenSequence(ids + [PAD_ID] * (length - n), [False] * n + [True] * (length - n))


def tokenize_class_names(names: Sequence[str], config: ModelConfig) -> list[TokenSequence]:
    longest = max(len(split_words(n)) for n in names)
    return [tokenize(n, "class_name", config, pad_to=longest) for n in names]


def batch_tokens(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.zeros(len(seqs), width, dtype=torch.long)
    mask = torch.ones(len(seqs), width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s.ids)
        mask[i, : len(s)] = torch.tensor(s.pad_mask)
    return ids, mask


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_padding_mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(multi_head_attention(q, k, v, self.heads, key_padding_mask))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a 4x GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask)
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.c_l)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_caption_tokens, cfg.c_l))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.c_l, cfg.heads) for _ in range(cfg.encoder_depth))
        nn.init.normal_(self.token_embed.weight, std=0.5)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """(S, T) token ids -> (S, C_l), masked mean over real tokens."""
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        if ids.shape[1] > self.pos_embed.shape[0]:
            raise ShapeError("encode_text", ids.shape, self.pos_embed.shape)
        x = self.token_embed(ids) + self.pos_embed[: ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, pad_mask)
        keep = (~pad_mask).unsqueeze(-1).to(x.dtype)
        return (x * keep).sum(1) / keep.sum(1).clamp_min(1.0)


class ImageEncoder(nn.Module):
    """Non-overlapping patch embedding followed by transformer blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gh, gw = cfg.grid
        self.patch_embed = nn.Conv2d(3, cfg.c_v, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(gh * gw, cfg.c_v))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.c_v, cfg.heads) for _ in range(cfg.encoder_depth))
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> v0 tokens (B, H/p * W/p, C_v), row-major over the grid."""
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, *self.cfg.image_size):
            raise ShapeError("encode_image", images.shape, (3, *self.cfg.image_size))
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return x


class GlobalProjection(nn.Module):
    """Mean over visual tokens, then a linear map into the language width."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.c_v, cfg.c_l)

    def forward(self, v0: torch.Tensor) -> torch.Tensor:
        return self.proj(v0.mean(dim=-2))


def encode_texts(encoder: TextEncoder, seqs: Sequence[TokenSequence]) -> torch.Tensor:
    ids, mask = batch_tokens(seqs)
    return encoder(ids, mask)


def tokens_to_grid(tokens: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """(B, h*w, C) -> (B, C, h, w)."""
    b, _, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, *grid)
