"""Training objective: deep-supervised soft dice + latent MSE + alignment."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from wavegms.types import DeepSupervisionBundle

DICE_EPS = 1e-5
ALIGN_COS_WEIGHT = 0.9
ALIGN_L1_WEIGHT = 0.1


@dataclass
class LossReport:
    """Loss components. ``total`` keeps its graph; the rest are detached."""

    seg: torch.Tensor
    lm: torch.Tensor
    align: torch.Tensor
    total: torch.Tensor
    per_stage_seg: list[float]
    per_stage_lm: list[float]

    def as_row(self) -> dict[str, float]:
        return {
            "seg": float(self.seg),
            "lm": float(self.lm),
            "align": float(self.align),
            "total": float(self.total.detach()),
        }

    def is_finite(self) -> bool:
        return all(torch.isfinite(t).all() for t in (self.seg, self.lm, self.align, self.total))


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Batch mean of ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``."""
    _same_shape(pred, target)
    dims = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(dims)
    denom = pred.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def seg_loss(bundle: DeepSupervisionBundle, target: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    if bundle.stage_masks is None:
        raise ValueError("bundle has no decoded stage masks")
    per_stage = [soft_dice(m, target) for m in bundle.stage_masks]
    return torch.stack(per_stage).mean(), per_stage


def lm_loss(bundle: DeepSupervisionBundle, z_m: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    per_stage = []
    for z in bundle.stage_latents:
        _same_shape(z, z_m)
        per_stage.append(((z - z_m) ** 2).mean())
    return torch.stack(per_stage).mean(), per_stage


def align_loss(z_mr: torch.Tensor, z_i: torch.Tensor) -> torch.Tensor:
    """``0.9 (1 - cos) + 0.1 mean|z_mr - z_i|``.

    Cosine is taken between per-sample flattened latents and averaged over
    the batch. A zero-norm sample has cosine 0, i.e. its cosine term is 1.
    """
    _same_shape(z_mr, z_i)
    a = z_mr.flatten(1)
    b = z_i.flatten(1)
    denom = a.norm(dim=1) * b.norm(dim=1)
    dot = (a * b).sum(dim=1)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    cos = torch.where(denom > 0, dot / safe, torch.zeros_like(dot))
    return ALIGN_COS_WEIGHT * (1.0 - cos).mean() + ALIGN_L1_WEIGHT * (z_mr - z_i).abs().mean()


def total_loss(
    bundle: DeepSupervisionBundle,
    target: torch.Tensor,
    z_m: torch.Tensor,
    z_mr: torch.Tensor,
    z_i: torch.Tensor,
    align_enabled: bool = True,
) -> LossReport:
    seg, seg_stages = seg_loss(bundle, target)
    lm, lm_stages = lm_loss(bundle, z_m)
    if align_enabled:
        align = align_loss(z_mr, z_i)
        total = seg + lm + align
    else:
        align = torch.zeros((), dtype=seg.dtype, device=seg.device)
        total = seg + lm
    return LossReport(
        seg=seg.detach(),
        lm=lm.detach(),
        align=align.detach(),
        total=total,
        per_stage_seg=[float(s.detach()) for s in seg_stages],
        per_stage_lm=[float(s.detach()) for s in lm_stages],
    )
