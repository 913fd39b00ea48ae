"""DSC, IoU and HD95 on binary masks, plus per-image dataset aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

HD95_PERCENTILE = 95.0


def _as_bool(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if hasattr(mask, "detach"):
        arr = mask.detach().cpu().numpy()
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a single 2D mask, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} is not binary")
    return arr.astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_bool(pred, "pred"), _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image edge."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
    return mask & ~interior[1:-1, 1:-1]


def surface_distances(pred, gt) -> np.ndarray:
    """Pooled nearest boundary-to-boundary distances, both directions."""
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_g[bp], to_p[bg]])


def hd95(pred, gt) -> float:
    """95th percentile (linear interpolation) of pooled surface distances.

    Both masks empty -> 0. Exactly one empty -> the image diagonal.
    """
    p, g = _pair(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return float(np.hypot(*p.shape))
    return float(np.percentile(surface_distances(p, g), HD95_PERCENTILE, method="linear"))


@dataclass
class MetricsReport:
    """Dataset aggregate: DSC and IoU in percent, HD95 in pixels."""

    dsc: float
    iou: float
    hd95: float
    n_images: int
    per_image: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"dsc": self.dsc, "iou": self.iou, "hd95": self.hd95, "n_images": self.n_images}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in ("dsc", "iou", "hd95", "n_images")},
                   per_image=d.get("per_image", []), meta=d.get("meta", {}))


def evaluate_dataset(preds, gts, names=None) -> MetricsReport:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth masks")
    if not preds:
        raise ValueError("nothing to evaluate")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    rows = []
    for name, p, g in zip(names, preds, gts):
        rows.append({"name": name, "dice": dice(p, g), "iou": iou(p, g), "hd95": hd95(p, g)})
    return MetricsReport(
        dsc=round(100.0 * float(np.mean([r["dice"] for r in rows])), 2),
        iou=round(100.0 * float(np.mean([r["iou"] for r in rows])), 2),
        hd95=round(float(np.mean([r["hd95"] for r in rows])), 2),
        n_images=len(rows),
        per_image=rows,
    )
