"""Resolution-preserving building blocks shared by the encoder and the LMM."""

from __future__ import annotations

import math

import torch
from torch import nn


def norm(channels: int, groups: int = 8) -> nn.GroupNorm:
    g = math.gcd(groups, channels)
    return nn.GroupNorm(g, channels)


class ResBlock(nn.Module):
    """GN-SiLU-conv x2 with a (1x1 if needed) residual path. Never resamples."""

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True):
        super().__init__()
        self.body = nn.Sequential(
            norm(in_ch),
            nn.SiLU(),
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=bias),
            norm(out_ch),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias),
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.skip(x)


class SpatialSelfAttention(nn.Module):
    """Single-head self-attention over all h*w positions, with a residual add."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def _qkv(self, x: torch.Tensor):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        return q, k, v

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """[B, hw, hw] row-stochastic matrix; row i attends from query position i."""
        q, k, _ = self._qkv(x)
        return torch.softmax(torch.einsum("bci,bcj->bij", q, k) * self.scale, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self._qkv(x)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) * self.scale, dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class ResAttnBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch)
        self.attn = SpatialSelfAttention(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.attn(self.res(x))


def count_params(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
