"""Shared tensor conventions: value ranges, masks and the deep-supervision bundle."""

from __future__ import annotations

from dataclasses import dataclass

import torch

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
NUM_STAGES = 4
DEFAULT_SIZE = 224
MASK_THRESHOLD = 0.5

_RANGE_TOL = 1e-6


def check_spatial(x: torch.Tensor, multiple: int = DOWNSAMPLE) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected a [B, C, H, W] tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"spatial size {h}x{w} is not divisible by {multiple}")


def check_range(x: torch.Tensor, lo: float, hi: float, name: str = "input") -> None:
    if x.numel() == 0:
        return
    xmin, xmax = float(x.detach().min()), float(x.detach().max())
    if xmin < lo - _RANGE_TOL or xmax > hi + _RANGE_TOL:
        raise ValueError(f"{name} values [{xmin:.4g}, {xmax:.4g}] fall outside [{lo}, {hi}]")


def to_signed_range(img: torch.Tensor) -> torch.Tensor:
    """Map a unit-range image ([0, 1]) to the signed VAE range ([-1, 1])."""
    check_range(img, 0.0, 1.0, "unit-range image")
    return img * 2.0 - 1.0


def to_unit_range(img: torch.Tensor) -> torch.Tensor:
    check_range(img, -1.0, 1.0, "signed-range image")
    return (img + 1.0) * 0.5


def binarize(pred: torch.Tensor, threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    """Strict ``pred > threshold`` as a float {0, 1} mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (pred > threshold).to(pred.dtype if pred.is_floating_point() else torch.float32)


def check_binary(mask: torch.Tensor, name: str = "mask") -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError(f"{name} is not binary")


def broadcast_mask(mask: torch.Tensor) -> torch.Tensor:
    """[B, 1, H, W] binary mask -> [B, 3, H, W] view with identical channels."""
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ValueError(f"expected a [B, 1, H, W] mask, got {tuple(mask.shape)}")
    return mask.expand(-1, 3, -1, -1)


def latent_shape(batch: int, height: int, width: int) -> tuple[int, int, int, int]:
    return (batch, LATENT_CHANNELS, height // DOWNSAMPLE, width // DOWNSAMPLE)


@dataclass
class DeepSupervisionBundle:
    """Per-decoder-stage outputs of the latent mapping model.

    ``stage_latents[-1]`` is the predicted mask latent used at inference.
    ``stage_masks`` is filled in by the pipeline after decoding each stage
    latent through the frozen VAE; probabilities in [0, 1], shape [B, 1, H, W].
    """

    stage_latents: list[torch.Tensor]
    stage_masks: list[torch.Tensor] | None = None

    def __post_init__(self) -> None:
        if len(self.stage_latents) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage latents, got {len(self.stage_latents)}")
        if self.stage_masks is not None and len(self.stage_masks) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage masks, got {len(self.stage_masks)}")

    @property
    def final_latent(self) -> torch.Tensor:
        return self.stage_latents[-1]
