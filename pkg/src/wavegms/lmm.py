"""Latent mapping model: multi-resolution latent -> mask latent.

Encoder-decoder of ResAttn blocks at constant spatial resolution. The
decoder mirrors the encoder widths; each decoder stage after the first
concatenates the output of its paired encoder stage, and the first decoder
stage consumes the deepest encoder stage directly. Every decoder stage has
a 1x1 head onto the 4 latent channels for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from wavegms.blocks import ResAttnBlock, count_params, norm
from wavegms.types import LATENT_CHANNELS, NUM_STAGES, DeepSupervisionBundle


@dataclass
class LmmConfig:
    in_channels: int = LATENT_CHANNELS
    stem_channels: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 96, 128])
    out_channels: int = LATENT_CHANNELS
    parameter_budget: float = 1.56e6

    def __post_init__(self) -> None:
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"need {NUM_STAGES} stage widths, got {self.stage_channels}")


class LatentMappingModel(nn.Module):
    def __init__(self, config: LmmConfig | None = None):
        super().__init__()
        self.config = cfg = config or LmmConfig()
        widths = list(cfg.stage_channels)
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_channels, 3, padding=1),
            norm(cfg.stem_channels),
            nn.SiLU(),
        )
        self.enc = nn.ModuleList()
        ch = cfg.stem_channels
        for w in widths:
            self.enc.append(ResAttnBlock(ch, w))
            ch = w
        self.dec = nn.ModuleList()
        rev = widths[::-1]
        for j, w in enumerate(rev):
            # decoder stage j (0-based) pairs with encoder stage NUM_STAGES-1-j;
            # for j == 0 that is the block feeding it, so no concat is needed
            skip = 0 if j == 0 else rev[j]
            self.dec.append(ResAttnBlock(ch + skip, w))
            ch = w
        self.heads = nn.ModuleList(
            nn.Sequential(norm(w), nn.SiLU(), nn.Conv2d(w, cfg.out_channels, 1)) for w in rev
        )

    def _check(self, z: torch.Tensor) -> None:
        if z.ndim != 4 or z.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [B, {self.config.in_channels}, h, w] latent, got {tuple(z.shape)}"
            )

    def _decoder_features(self, z: torch.Tensor) -> list[torch.Tensor]:
        self._check(z)
        size = z.shape[-2:]
        h = self.stem(z)
        skips = []
        for block in self.enc:
            h = block(h)
            skips.append(h)
        feats = []
        for j, block in enumerate(self.dec):
            if j > 0:
                h = torch.cat([h, skips[NUM_STAGES - 1 - j]], dim=1)
            h = block(h)
            assert h.shape[-2:] == size, "LMM must not resample"
            feats.append(h)
        return feats

    def forward(self, z_mr: torch.Tensor) -> DeepSupervisionBundle:
        feats = self._decoder_features(z_mr)
        return DeepSupervisionBundle([head(f) for head, f in zip(self.heads, feats)])

    def forward_inference(self, z_mr: torch.Tensor) -> torch.Tensor:
        """Final-stage latent only; deep-supervision heads 1..3 are skipped."""
        return self.heads[-1](self._decoder_features(z_mr)[-1])

    def num_params(self) -> int:
        return count_params(self)
