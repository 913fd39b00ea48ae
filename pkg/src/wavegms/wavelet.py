"""Orthonormal 2D Haar analysis/synthesis and the 3-level multi-resolution stack.

Subband convention, for each 2x2 block ``[[a, b], [c, d]]`` (rows top to bottom):

    LL = (a + b + c + d) / 2     low-pass in both directions
    LH = (a + b - c - d) / 2     high-pass along height: horizontal edges
    HL = (a - b + c - d) / 2     high-pass along width: vertical edges
    HH = (a - b - c + d) / 2     diagonal detail

The 1/2 factor is the product of two 1/sqrt(2) taps, so the transform is
orthonormal and preserves energy. Checkpoints depend on this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

NUM_LEVELS = 3
SUBBANDS = ("LL", "LH", "HL", "HH")


@dataclass
class HaarLevel:
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor
    level: int = 1

    def __post_init__(self) -> None:
        shapes = {tuple(t.shape) for t in self.bands()}
        if len(shapes) != 1:
            raise ValueError(f"subband shapes differ: {sorted(shapes)}")

    def bands(self) -> tuple[torch.Tensor, ...]:
        return (self.ll, self.lh, self.hl, self.hh)

    def stack(self) -> torch.Tensor:
        """Channel concat ``[LL | LH | HL | HH]``; 12 channels for RGB input."""
        return torch.cat(self.bands(), dim=1)

    @classmethod
    def from_stack(cls, stack: torch.Tensor, level: int = 1) -> "HaarLevel":
        if stack.shape[1] % 4:
            raise ValueError(f"stack channel count {stack.shape[1]} is not divisible by 4")
        return cls(*torch.chunk(stack, 4, dim=1), level=level)


def dwt2_haar(x: torch.Tensor, level: int = 1) -> HaarLevel:
    """One level of the orthonormal 2D Haar transform of a [B, C, H, W] tensor."""
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"Haar analysis needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return HaarLevel(
        ll=(a + b + c + d) * 0.5,
        lh=(a + b - c - d) * 0.5,
        hl=(a - b + c - d) * 0.5,
        hh=(a - b - c + d) * 0.5,
        level=level,
    )


def idwt2_haar(level: HaarLevel) -> torch.Tensor:
    """Exact inverse of :func:`dwt2_haar`."""
    ll, lh, hl, hh = level.bands()
    bsz, ch, h, w = ll.shape
    out = ll.new_empty(bsz, ch, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


@dataclass
class MultiResDecomposition:
    levels: list[HaarLevel]

    def stacks(self) -> list[torch.Tensor]:
        return [lvl.stack() for lvl in self.levels]

    def reconstruct(self) -> torch.Tensor:
        """Invert the cascade. Only the coarsest LL and all detail bands are used."""
        approx = self.levels[-1].ll
        for lvl in reversed(self.levels):
            approx = idwt2_haar(HaarLevel(approx, lvl.lh, lvl.hl, lvl.hh, lvl.level))
        return approx


def multires_decompose(img: torch.Tensor, levels: int = NUM_LEVELS) -> MultiResDecomposition:
    """Recursive Haar cascade on the LL band; level ``l`` has size H/2^l."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = []
    approx = img
    for lvl in range(1, levels + 1):
        band = dwt2_haar(approx, level=lvl)
        out.append(band)
        approx = band.ll
    return MultiResDecomposition(out)
