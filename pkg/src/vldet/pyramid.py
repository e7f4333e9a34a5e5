"""VL-PUB: fuse the single-scale map with text, then build a five-level pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoders import tokens_to_grid
from .fusion import TextRefine, VLFuse

LEVEL_FACTORS = (4.0, 2.0, 1.0, 0.5, 0.25)


def pyramid_shapes(height: int, width: int, patch: int) -> list[tuple[int, int]]:
    """Spatial extents of the five levels, from 4x the patch grid down to 1/4."""
    for name, extent in (("H", height), ("W", width)):
        if extent % patch:
            raise ValueError(f"{name}={extent} is not a multiple of the patch size {patch}")
        if (extent // patch) % 4:
            raise ValueError(f"{name}/p={extent // patch} is not divisible by 4")
    gh, gw = height // patch, width // patch
    return [(int(gh * f), int(gw * f)) for f in LEVEL_FACTORS]


def pyramid_strides(patch: int) -> list[float]:
    return [patch / f for f in LEVEL_FACTORS]


@dataclass
class PyramidFeatures:
    levels: list[torch.Tensor]  # each (B, C_pyr, h_i, w_i)
    strides: list[float]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.levels]

    def flatten(self) -> torch.Tensor:
        """All cells of all levels as one token set (B, sum h_i*w_i, C), level-major, row-major."""
        return torch.cat([t.flatten(2) for t in self.levels], dim=2).transpose(1, 2)

    def unflatten(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        out, start = [], 0
        for h, w in self.shapes:
            chunk = tokens[:, start:start + h * w]
            out.append(tokens_to_grid(chunk, (h, w)))
            start += h * w
        return out


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def _resample(c: int, factor: float) -> nn.Module:
    if factor == 4:
        return nn.Sequential(nn.ConvTranspose2d(c, c, 2, 2), nn.GELU(), nn.ConvTranspose2d(c, c, 2, 2))
    if factor == 2:
        return nn.ConvTranspose2d(c, c, 2, 2)
    if factor == 1:
        return nn.Identity()
    if factor == 0.5:
        return nn.MaxPool2d(2, 2)
    if factor == 0.25:
        return nn.Sequential(nn.MaxPool2d(2, 2), nn.MaxPool2d(2, 2))
    raise ValueError(factor)


class PyramidLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int, factor: float):
        super().__init__()
        self.resample = _resample(c_in, factor)
        self.lateral = nn.Conv2d(c_in, c_out, 1)
        self.smooth = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm = ChannelNorm(c_out)

    def forward(self, x):
        return self.norm(self.smooth(self.lateral(self.resample(x))))


class VLPUB(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fuse = VLFuse(cfg.c_v, cfg.c_l, cfg.heads)
        self.refine = TextRefine(cfg.c_l, cfg.heads)
        self.levels = nn.ModuleList(PyramidLevel(cfg.c_v, cfg.c_pyr, f) for f in LEVEL_FACTORS)

    def forward(self, v0: torch.Tensor, l_cls: torch.Tensor, l_cap: torch.Tensor | None = None):
        """v0 (B, T, C_v); l_cls (N, C_l) or (B, N, C_l); l_cap (B, C_l) or None.

        Returns the pyramid and the refined class rows (B, N, C_l). The caption
        row takes part in fusion only.
        """
        b = v0.shape[0]
        if l_cls.dim() == 2:
            l_cls = l_cls.unsqueeze(0).expand(b, -1, -1)
        n = l_cls.shape[1]
        text = l_cls if l_cap is None else torch.cat([l_cls, l_cap.unsqueeze(1)], dim=1)
        v_f, l_f = self.fuse(v0, text)
        l_pub = self.refine(l_f[:, :n])
        grid = tokens_to_grid(v_f, self.cfg.grid)
        levels = [lvl(grid) for lvl in self.levels]
        return PyramidFeatures(levels, pyramid_strides(self.cfg.patch_size)), l_pub
