"""Optimization loop: AdamW + per-epoch cosine annealing, checkpoints and
model selection on validation Dice."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from wavegms.data import AugmentationPolicy, SegmentationDataset, iterate_batches
from wavegms.encoder import EncoderConfig
from wavegms.lmm import LmmConfig
from wavegms.losses import LossReport, total_loss
from wavegms.metrics import MetricsReport, evaluate_dataset
from wavegms.pipeline import WaveGms
from wavegms.types import to_signed_range
from wavegms.vae import FrozenVae

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "epoch", "lr", "seg", "lm", "align", "total"]
HISTORY_COLUMNS = ["epoch", "lr", "train_total", "val_dice"]


@dataclass
class TrainConfig:
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    eta_min: float = 0.0
    batch_size: int = 12
    epochs: int = 1000
    seed: int = 2333
    align_enabled: bool = True
    augment: bool = True
    val_fraction: float = 0.1
    grad_clip: float | None = None
    micro_batch: int | None = None
    deterministic: bool = True
    device: str = "cpu"
    latent_source: str = "wavelet"
    eval_batch_size: int = 12
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lmm: LmmConfig = field(default_factory=LmmConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        self.betas = tuple(self.betas)
        for name, cls in (("encoder", EncoderConfig), ("lmm", LmmConfig),
                          ("augmentation", AugmentationPolicy)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        d.update(overrides)
        return TrainConfig.from_dict(d)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Closed form of the per-epoch schedule (epoch is 0-based)."""
    return config.eta_min + 0.5 * (config.lr - config.eta_min) * (1 + math.cos(math.pi * epoch / config.epochs))


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def build_model(config: TrainConfig, vae: FrozenVae) -> WaveGms:
    """Seeds torch before any weight is created."""
    seed_everything(config.seed, config.deterministic)
    model = WaveGms(vae, config.encoder, config.lmm, config.latent_source)
    return model.to(resolve_device(config.device))


def make_optimizer(model: WaveGms, config: TrainConfig):
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=config.lr,
                            betas=config.betas, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs, eta_min=config.eta_min)
    return opt, sched


def _merge_reports(parts: list[tuple[float, LossReport]]) -> LossReport:
    """Weighted mean of micro-batch reports (weights are batch fractions)."""
    def mean(get):
        return sum(w * get(r).detach() for w, r in parts)

    def stage_mean(get):
        return [sum(w * get(r)[i] for w, r in parts) for i in range(len(get(parts[0][1])))]

    return LossReport(mean(lambda r: r.seg), mean(lambda r: r.lm), mean(lambda r: r.align),
                      mean(lambda r: r.total), stage_mean(lambda r: r.per_stage_seg),
                      stage_mean(lambda r: r.per_stage_lm))


def train_step(model: WaveGms, optimizer: torch.optim.Optimizer, images: torch.Tensor,
               masks: torch.Tensor, align_enabled: bool = True,
               grad_clip: float | None = None, micro_batch: int | None = None) -> LossReport:
    """One forward/backward/update. ``images`` are unit range [B, 3, H, W].

    ``micro_batch`` accumulates gradients over chunks of that size. Every
    loss term is a per-sample batch mean, so the update is the same as one
    full-batch pass up to float rounding; only peak memory changes.
    """
    model.train()
    n = images.shape[0]
    chunk = n if not micro_batch or micro_batch >= n else micro_batch
    optimizer.zero_grad(set_to_none=True)
    parts = []
    for start in range(0, n, chunk):
        img, mask = images[start:start + chunk], masks[start:start + chunk]
        out = model.forward_train(to_signed_range(img), mask)
        report = total_loss(out.bundle, mask, out.z_m, out.z_mr, out.z_i, align_enabled)
        if not report.is_finite():
            raise FloatingPointError(
                f"non-finite loss: {report.as_row()} per-stage seg={report.per_stage_seg} "
                f"per-stage lm={report.per_stage_lm}"
            )
        weight = img.shape[0] / n
        (report.total * weight).backward()
        parts.append((weight, report))
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), grad_clip)
    optimizer.step()
    return parts[0][1] if len(parts) == 1 else _merge_reports(parts)


@torch.no_grad()
def predict(model: WaveGms, images: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Unit-range images -> binary masks [B, 1, H, W]."""
    model.eval()
    device = next(model.parameters()).device
    return model.forward_infer(to_signed_range(images.to(device)), threshold).cpu()


def evaluate(model: WaveGms, dataset: SegmentationDataset, batch_size: int = 12) -> MetricsReport:
    preds, gts, names = [], [], []
    for imgs, masks, batch_names in iterate_batches(dataset, batch_size):
        preds.extend(predict(model, imgs))
        gts.extend(masks)
        names.extend(batch_names)
    return evaluate_dataset(preds, gts, names)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(directory: str | Path, model: WaveGms, config: TrainConfig,
                    state: dict, optimizer=None, scheduler=None) -> Path:
    """Directory with ``model.safetensors``, ``manifest.json`` and ``optim.pt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()
               if not k.startswith("vae.")}
    save_file(tensors, str(directory / "model.safetensors"))
    if optimizer is not None:
        torch.save({"optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict() if scheduler else None},
                   directory / "optim.pt")
    manifest = {
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()},
        "config": config.to_dict(),
        "vae_fingerprint": model.vae.fingerprint(),
        "vae_source": model.vae.source,
        "params": model.param_report(),
        **state,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_checkpoint(directory: str | Path, vae: FrozenVae, strict_vae: bool = True,
                    device: str = "cpu") -> tuple[WaveGms, dict]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if strict_vae and manifest["vae_fingerprint"] != vae.fingerprint():
        raise ValueError(
            f"checkpoint was trained with VAE {manifest['vae_source']!r}; "
            f"the supplied VAE ({vae.source!r}) has a different fingerprint"
        )
    config = TrainConfig.from_dict(manifest["config"]).replace(device=device)
    model = WaveGms(vae, config.encoder, config.lmm, config.latent_source)
    missing, unexpected = model.load_state_dict(load_file(str(directory / "model.safetensors")), strict=False)
    missing = [k for k in missing if not k.startswith("vae.")]
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
    return model.to(resolve_device(device)), manifest


def load_lmm_weights(model: WaveGms, path: str | Path) -> None:
    """Load externally trained LMM weights (``lmm.*`` or bare keys)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"LMM weights not found: {path}")
    if path.suffix == ".safetensors":
        state = load_file(str(path))
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
    state = {k.removeprefix("lmm."): v for k, v in state.items() if not k.startswith(("encoder.", "vae."))}
    model.lmm.load_state_dict(state)


# -- fit --------------------------------------------------------------------------


@dataclass
class FitResult:
    best_dir: Path
    last_dir: Path
    best_val_dice: float
    best_epoch: int
    losses: list[dict]
    history: list[dict]


def _append_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, columns, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def fit(config: TrainConfig, train_ds: SegmentationDataset, val_ds: SegmentationDataset,
        vae: FrozenVae, out_dir: str | Path, resume: str | Path | None = None,
        stop_after_epoch: int | None = None) -> FitResult:
    """Full schedule with per-epoch validation Dice.

    Writes ``best/`` and ``last/`` checkpoints, ``train_log.csv`` (per step)
    and ``history.csv`` (per epoch) under ``out_dir``. ``stop_after_epoch``
    ends the run early without changing the schedule (used to test resume).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config, vae)
    optimizer, scheduler = make_optimizer(model, config)
    start_epoch, step, best, best_epoch = 0, 0, -1.0, -1
    if resume is not None:
        resume = Path(resume)
        manifest = read_manifest(resume)
        if manifest["vae_fingerprint"] != vae.fingerprint():
            raise ValueError("resume checkpoint was trained with a different VAE")
        model.load_state_dict(load_file(str(resume / "model.safetensors")), strict=False)
        opt_state = torch.load(resume / "optim.pt", map_location="cpu", weights_only=False)
        optimizer.load_state_dict(opt_state["optimizer"])
        scheduler.load_state_dict(opt_state["scheduler"])
        start_epoch = manifest["epoch"] + 1
        step = manifest["step"]
        best, best_epoch = manifest["best_val_dice"], manifest["best_epoch"]
    params = model.param_report()
    log.info("trainable parameters: %d (encoder %d, lmm %d); frozen VAE %d",
             params["trainable"], params["encoder"], params["lmm"], params["frozen"])
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    device = resolve_device(config.device)
    policy = config.augmentation if config.augment else None
    losses, history = [], []
    last_epoch = config.epochs - 1 if stop_after_epoch is None else min(stop_after_epoch, config.epochs - 1)
    for epoch in range(start_epoch, last_epoch + 1):
        lr = optimizer.param_groups[0]["lr"]
        epoch_rows = []
        for imgs, masks, _ in iterate_batches(train_ds, config.batch_size, shuffle=True,
                                              seed=config.seed, epoch=epoch, policy=policy):
            try:
                report = train_step(model, optimizer, imgs.to(device), masks.to(device),
                                    config.align_enabled, config.grad_clip, config.micro_batch)
            except RuntimeError as exc:
                if "out of memory" in str(exc):
                    raise RuntimeError(f"{exc}\nout of memory: lower batch_size "
                                       f"(currently {config.batch_size}) or set micro_batch") from exc
                raise
            step += 1
            epoch_rows.append({"step": step, "epoch": epoch, "lr": lr, **report.as_row()})
        scheduler.step()
        val_dice = evaluate(model, val_ds, config.eval_batch_size).dsc / 100.0
        train_total = sum(r["total"] for r in epoch_rows) / max(1, len(epoch_rows))
        history.append({"epoch": epoch, "lr": lr, "train_total": train_total, "val_dice": val_dice})
        losses.extend(epoch_rows)
        _append_csv(out_dir / "train_log.csv", LOSS_COLUMNS, epoch_rows)
        _append_csv(out_dir / "history.csv", HISTORY_COLUMNS, history[-1:])
        if val_dice > best:
            best, best_epoch = val_dice, epoch
            save_checkpoint(out_dir / "best", model, config,
                            {"epoch": epoch, "step": step, "best_val_dice": best, "best_epoch": best_epoch})
        save_checkpoint(out_dir / "last", model, config,
                        {"epoch": epoch, "step": step, "best_val_dice": best, "best_epoch": best_epoch},
                        optimizer, scheduler)
        log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr, train_total, val_dice)
    return FitResult(out_dir / "best", out_dir / "last", best, best_epoch, losses, history)
