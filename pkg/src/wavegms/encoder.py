"""Trainable multi-resolution encoder: Haar cascade -> per-level extractors ->
dyadic average-pool fusion -> aggregation network -> 4-channel latent."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from wavegms.blocks import ResBlock, count_params, norm
from wavegms.types import LATENT_CHANNELS
from wavegms.wavelet import NUM_LEVELS, multires_decompose

LEVEL_CHANNELS = 12  # 3 RGB channels x 4 subbands


@dataclass
class EncoderConfig:
    per_level_channels: int = 32
    aggregation_channels: int = 36
    blocks_per_module: int = 2
    # inner width of each per-level U-Net; the aggregation U-Net uses
    # aggregation_channels for the same role
    extractor_width: int = 16
    bias: bool = True
    parameter_budget: float = 1.03e6


class FlatUNet(nn.Module):
    """U-Net layout at a single resolution.

    Two "down" groups (width w, then 2w), a middle block, and two "up" groups
    that consume the matching down activations through channel concatenation.
    There is no pooling or upsampling, so the spatial size never changes.
    """

    def __init__(self, in_ch: int, out_ch: int, width: int, blocks: int, bias: bool = True):
        super().__init__()
        widths = (width, 2 * width)
        self.stem = nn.Conv2d(in_ch, width, 3, padding=1, bias=bias)
        self.down = nn.ModuleList()
        ch = width
        skip_chs = []
        for w in widths:
            group = nn.ModuleList()
            for _ in range(blocks):
                group.append(ResBlock(ch, w, bias=bias))
                ch = w
            self.down.append(group)
            skip_chs.append(ch)
        self.mid = ResBlock(ch, ch, bias=bias)
        self.up = nn.ModuleList()
        for w, skip in zip(reversed(widths), reversed(skip_chs)):
            group = nn.ModuleList([ResBlock(ch + skip, w, bias=bias)])
            ch = w
            for _ in range(blocks - 1):
                group.append(ResBlock(ch, w, bias=bias))
            self.up.append(group)
        self.out = nn.Sequential(norm(ch), nn.SiLU(), nn.Conv2d(ch, out_ch, 3, padding=1, bias=bias))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        h = self.stem(x)
        skips = []
        for group in self.down:
            for block in group:
                h = block(h)
            skips.append(h)
        h = self.mid(h)
        for group in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in group:
                h = block(h)
        out = self.out(h)
        assert out.shape[-2:] == size, "FlatUNet must not resample"
        return out


def fuse_levels(f1: torch.Tensor, f2: torch.Tensor, f3: torch.Tensor) -> torch.Tensor:
    """``[pool(pool(f1)) | pool(f2) | f3]`` with 2x2 average pooling."""
    h3, w3 = f3.shape[-2:]
    if f2.shape[-2:] != (2 * h3, 2 * w3) or f1.shape[-2:] != (4 * h3, 4 * w3):
        raise ValueError(
            "feature maps are not dyadic: "
            f"{tuple(f1.shape[-2:])}, {tuple(f2.shape[-2:])}, {tuple(f3.shape[-2:])}"
        )
    return torch.cat([F.avg_pool2d(f1, 4), F.avg_pool2d(f2, 2), f3], dim=1)


class MultiResEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        c = cfg.per_level_channels
        self.extractors = nn.ModuleList(
            FlatUNet(LEVEL_CHANNELS, c, cfg.extractor_width, cfg.blocks_per_module, cfg.bias)
            for _ in range(NUM_LEVELS)
        )
        self.aggregator = FlatUNet(
            NUM_LEVELS * c, LATENT_CHANNELS, cfg.aggregation_channels, cfg.blocks_per_module, cfg.bias
        )

    def extract_features(self, level_stack: torch.Tensor, level: int) -> torch.Tensor:
        if level not in range(1, NUM_LEVELS + 1):
            raise ValueError(f"level must be in 1..{NUM_LEVELS}, got {level}")
        if level_stack.shape[1] != LEVEL_CHANNELS:
            raise ValueError(f"expected {LEVEL_CHANNELS} channels, got {level_stack.shape[1]}")
        return self.extractors[level - 1](level_stack)

    def aggregate(self, fused: torch.Tensor) -> torch.Tensor:
        expected = NUM_LEVELS * self.config.per_level_channels
        if fused.shape[1] != expected:
            raise ValueError(f"expected {expected} channels, got {fused.shape[1]}")
        return self.aggregator(fused)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """Signed-range image [B, 3, H, W] -> multi-resolution latent [B, 4, H/8, W/8]."""
        stacks = multires_decompose(img, NUM_LEVELS).stacks()
        feats = [self.extract_features(s, lvl) for lvl, s in enumerate(stacks, start=1)]
        return self.aggregate(fuse_levels(*feats))

    encode = forward

    def num_params(self) -> int:
        return count_params(self)
