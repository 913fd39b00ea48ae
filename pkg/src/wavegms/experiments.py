"""Run configs and the three evaluation protocols: per-dataset results,
BUS/BUSI cross-domain transfer, and ablation variants."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from wavegms.data import DatasetSpec, LoaderAudit, discover, load_dataset, make_validation_split, split_samples
from wavegms.metrics import MetricsReport
from wavegms.training import TrainConfig, build_model, evaluate, fit, load_checkpoint, load_lmm_weights
from wavegms.vae import FrozenVae

log = logging.getLogger(__name__)

PROTOCOLS = ("main", "cross_domain", "ablation")
VARIANTS = ("full", "no_alignment", "tinyvae_trained", "tinyvae_model_mismatch", "batch2", "batch4")
REFERENCE_LABEL = "published reference"

# Published Wave-GMS numbers, kept for report annotation only.
REFERENCE = {
    "main": {
        "BUS": {"dsc": 90.14, "iou": 82.62, "hd95": 5.36},
        "BUSI": {"dsc": 82.31, "iou": 73.42, "hd95": 18.46},
        "HAM10000": {"dsc": 93.93, "iou": 89.37, "hd95": 9.25},
        "KvasirInstrument": {"dsc": 94.00, "iou": 89.40, "hd95": 9.24},
    },
    "cross_domain": {
        ("BUSI", "BUS"): {"dsc": 82.10, "hd95": 15.35},
        ("BUS", "BUSI"): {"dsc": 66.75, "hd95": 32.57},
    },
    "ablation": {
        "tinyvae_model_mismatch": {
            "BUS": {"dsc": 86.24, "iou": 77.88, "hd95": 9.48},
            "BUSI": {"dsc": 79.02, "iou": 69.97, "hd95": 20.79},
            "KvasirInstrument": {"dsc": 93.79, "iou": 89.33, "hd95": 9.37},
        },
        "tinyvae_trained": {
            "BUS": {"dsc": 89.38, "iou": 81.20, "hd95": 6.03},
            "BUSI": {"dsc": 81.05, "iou": 72.15, "hd95": 17.64},
            "KvasirInstrument": {"dsc": 92.08, "iou": 86.88, "hd95": 14.25},
        },
        "multires_sft": {
            "BUS": {"dsc": 89.95, "iou": 82.08, "hd95": 6.28},
            "BUSI": {"dsc": 80.98, "iou": 72.26, "hd95": 18.61},
            "KvasirInstrument": {"dsc": 93.11, "iou": 88.65, "hd95": 10.00},
        },
        "no_alignment": {
            "BUS": {"dsc": 89.54, "iou": 81.49, "hd95": 6.11},
            "BUSI": {"dsc": 82.24, "iou": 72.88, "hd95": 16.91},
            "KvasirInstrument": {"dsc": 93.92, "iou": 89.36, "hd95": 9.68},
        },
        "batch2": {
            "BUS": {"dsc": 89.84, "iou": 81.96, "hd95": 5.52},
            "BUSI": {"dsc": 80.32, "iou": 71.07, "hd95": 20.97},
            "KvasirInstrument": {"dsc": 92.93, "iou": 87.99, "hd95": 12.23},
        },
        "batch4": {
            "BUS": {"dsc": 90.11, "iou": 82.38, "hd95": 6.24},
            "BUSI": {"dsc": 79.12, "iou": 70.21, "hd95": 22.35},
            "KvasirInstrument": {"dsc": 92.00, "iou": 86.75, "hd95": 10.67},
        },
        "full": {
            "BUS": {"dsc": 90.14, "iou": 82.62, "hd95": 5.36},
            "BUSI": {"dsc": 82.31, "iou": 73.42, "hd95": 18.46},
            "KvasirInstrument": {"dsc": 94.00, "iou": 89.40, "hd95": 9.24},
        },
    },
}

ABLATION_ROWS = [
    ("tinyvae_model_mismatch", "Tiny-VAE (model mismatch)"),
    ("tinyvae_trained", "Tiny-VAE (trained)"),
    ("multires_sft", "Tiny-VAE + MultiRes SFT"),
    ("no_alignment", "Wave-GMS (w/o alignment)"),
    ("batch2", "Wave-GMS (batch_size = 2)"),
    ("batch4", "Wave-GMS (batch_size = 4)"),
    ("full", "Wave-GMS (with alignment)"),
]
NOT_IMPLEMENTED = {"multires_sft"}


def reference_for(protocol: str, variant: str, train: str, evaluated: str) -> dict | None:
    if protocol == "main":
        return REFERENCE["main"].get(evaluated)
    if protocol == "cross_domain":
        return REFERENCE["cross_domain"].get((train, evaluated))
    return REFERENCE["ablation"].get(variant, {}).get(evaluated)


# -- configs ----------------------------------------------------------------------


@dataclass
class VaeConfig:
    weights: str | None = None
    decoder_weights: str | None = None
    allow_standin: bool = False

    def build(self) -> FrozenVae:
        return FrozenVae.from_config(self.weights, self.decoder_weights, self.allow_standin)


@dataclass
class ExperimentConfig:
    train_dataset: DatasetSpec
    protocol: str = "main"
    variant: str = "full"
    eval_datasets: list[DatasetSpec] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    output_dir: str = "runs/default"
    lmm_weights: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.train_dataset, dict):
            self.train_dataset = DatasetSpec(**self.train_dataset)
        self.eval_datasets = [DatasetSpec(**d) if isinstance(d, dict) else d for d in self.eval_datasets]
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.vae, dict):
            self.vae = VaeConfig(**self.vae)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.protocol == "cross_domain":
            if not self.eval_datasets:
                raise ValueError("cross_domain needs an eval dataset")
            for ev in self.eval_datasets:
                if _same_dataset(ev, self.train_dataset):
                    raise ValueError("cross_domain requires train and eval datasets to differ")
        if self.variant == "tinyvae_model_mismatch" and not self.lmm_weights:
            raise ValueError("tinyvae_model_mismatch needs external LMM weights (lmm_weights)")

    def to_dict(self) -> dict:
        return asdict(self)

    def variant_train_config(self) -> TrainConfig:
        cfg = self.train
        if self.variant == "no_alignment":
            return cfg.replace(align_enabled=False)
        if self.variant in ("tinyvae_trained", "tinyvae_model_mismatch"):
            return cfg.replace(latent_source="tinyvae", align_enabled=False)
        if self.variant == "batch2":
            return cfg.replace(batch_size=2)
        if self.variant == "batch4":
            return cfg.replace(batch_size=4)
        return cfg


def _same_dataset(a: DatasetSpec, b: DatasetSpec) -> bool:
    return Path(a.root).resolve() == Path(b.root).resolve()


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """YAML or JSON run description. Top-level ``dataset`` aliases ``train_dataset``."""
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    raw = dict(raw or {})
    if "dataset" in raw:
        raw["train_dataset"] = raw.pop("dataset")
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    return ExperimentConfig(**raw)


# -- persistence ------------------------------------------------------------------


def save_report(report: MetricsReport, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1))
    with (directory / "per_image.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, ["name", "dice", "iou", "hd95"])
        writer.writeheader()
        writer.writerows(report.per_image)
    return directory / "metrics.json"


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def _annotate(report: MetricsReport, cfg: ExperimentConfig, evaluated: DatasetSpec) -> MetricsReport:
    report.meta.update({
        "protocol": cfg.protocol,
        "variant": cfg.variant,
        "train_dataset": cfg.train_dataset.name,
        "eval_dataset": evaluated.name,
        "label": f"{cfg.variant} {cfg.train_dataset.name}->{evaluated.name}",
    })
    ref = reference_for(cfg.protocol, cfg.variant, cfg.train_dataset.name, evaluated.name)
    if ref is not None:
        report.meta[REFERENCE_LABEL] = ref
    return report


def _finish(report: MetricsReport, cfg: ExperimentConfig, out: Path) -> MetricsReport:
    save_report(report, out)
    table = emit_table([report], reference=report.meta.get(REFERENCE_LABEL))
    (out / "table.md").write_text(table.markdown)
    (out / "table.csv").write_text(table.csv)
    return report


def _train(cfg: ExperimentConfig, train_cfg: TrainConfig, source: DatasetSpec, vae: FrozenVae,
           out: Path, audit: LoaderAudit | None = None):
    splits = load_dataset(source, audit)
    train_ds, val_ds = make_validation_split(splits.train, train_cfg.val_fraction, train_cfg.seed)
    result = fit(train_cfg, train_ds, val_ds, vae, out)
    model, _ = load_checkpoint(result.best_dir, vae, device=train_cfg.device)
    return model, splits


def run_main(cfg: ExperimentConfig, vae: FrozenVae | None = None) -> MetricsReport:
    """Train on the dataset's train split, report on its test split."""
    vae = vae or cfg.vae.build()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    model, splits = _train(cfg, cfg.variant_train_config(), cfg.train_dataset, vae, out)
    report = evaluate(model, splits.test, cfg.train.eval_batch_size)
    return _finish(_annotate(report, cfg, cfg.train_dataset), cfg, out)


class IsolationError(RuntimeError):
    pass


def run_cross_domain(cfg: ExperimentConfig, vae: FrozenVae | None = None,
                     audit: LoaderAudit | None = None) -> MetricsReport:
    """Train on the source, evaluate on the target's test split.

    Target files are listed (to rule out overlap) but never opened before the
    ``eval_start`` marker in the audit log.
    """
    if cfg.protocol != "cross_domain":
        raise ValueError("config protocol must be cross_domain")
    vae = vae or cfg.vae.build()
    audit = audit or LoaderAudit()
    target = cfg.eval_datasets[0]
    source_files = {p.resolve() for s in discover(cfg.train_dataset) for p in [s.image, *s.masks]}
    _, target_test = split_samples(target, discover(target))
    target_files = {p.resolve() for s in target_test for p in [s.image, *s.masks]}
    overlap = source_files & target_files
    if overlap:
        raise IsolationError(f"{len(overlap)} files shared by source and target, e.g. {sorted(overlap)[0]}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    model, _ = _train(cfg, cfg.variant_train_config(), cfg.train_dataset, vae, out, audit)
    leaked = audit.opened_under(target.root)
    if leaked:
        raise IsolationError(f"target files opened before evaluation: {leaked[:3]}")
    audit.mark("eval_start")
    splits = load_dataset(target, audit)
    report = evaluate(model, splits.test, cfg.train.eval_batch_size)
    report.meta["target_opened_before_eval"] = len(audit.opened_under(target.root, before="eval_start"))
    return _finish(_annotate(report, cfg, target), cfg, out)


def run_ablation(cfg: ExperimentConfig, vae: FrozenVae | None = None) -> MetricsReport:
    vae = vae or cfg.vae.build()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    train_cfg = cfg.variant_train_config()
    evaluated = cfg.eval_datasets[0] if cfg.eval_datasets else cfg.train_dataset
    if cfg.variant == "tinyvae_model_mismatch":
        model = build_model(train_cfg, vae)
        load_lmm_weights(model, cfg.lmm_weights)
    else:
        model, _ = _train(cfg, train_cfg, cfg.train_dataset, vae, out)
    report = evaluate(model, load_dataset(evaluated).test, cfg.train.eval_batch_size)
    report.meta["trainable_params"] = model.param_report()["trainable"]
    return _finish(_annotate(report, cfg, evaluated), cfg, out)


def run(cfg: ExperimentConfig, vae: FrozenVae | None = None) -> MetricsReport:
    if cfg.protocol == "cross_domain":
        return run_cross_domain(cfg, vae)
    if cfg.protocol == "ablation":
        return run_ablation(cfg, vae)
    return run_main(cfg, vae)


# -- tables -----------------------------------------------------------------------

METRIC_COLUMNS = {"dsc": ("DSC", True), "iou": ("IoU", True), "hd95": ("HD95", False)}


@dataclass
class Table:
    markdown: str
    csv: str
    flags: dict


def _metrics_of(item) -> dict:
    if isinstance(item, MetricsReport):
        return item.summary()
    return dict(item)


def emit_table(reports, labels=None, reference: dict | None = None, notes: dict | None = None) -> Table:
    """Markdown + CSV table in the given row order.

    With two or more rows the best value per column is bold and the second
    best underlined (higher is better for DSC/IoU, lower for HD95). Rows
    whose label is in ``notes`` are printed with that note instead of numbers.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    if labels is None:
        labels = [r.meta.get("label", f"run {i}") if isinstance(r, MetricsReport) else f"run {i}"
                  for i, r in enumerate(reports)]
    rows = [_metrics_of(r) for r in reports]
    columns = [k for k in METRIC_COLUMNS if k in rows[0]]
    for label, row in zip(labels, rows):
        if [k for k in METRIC_COLUMNS if k in row] != columns:
            raise ValueError(f"row {label!r} has a different metric set than the first row")
    flags: dict = {}
    if len(rows) >= 2:
        for col in columns:
            higher = METRIC_COLUMNS[col][1]
            ranked = sorted(set(r[col] for r in rows), reverse=higher)
            flags[col] = {"best": ranked[0], "second": ranked[1] if len(ranked) > 1 else None}

    def cell(col, value):
        text = f"{value:.2f}"
        f = flags.get(col)
        if f and value == f["best"]:
            return f"**{text}**"
        if f and value == f["second"]:
            return f"<u>{text}</u>"
        return text

    header = ["Model"] + [METRIC_COLUMNS[c][0] + ("↑" if METRIC_COLUMNS[c][1] else "↓") for c in columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["model"] + columns + [f"{c}_flag" for c in columns])
    for label, row in zip(labels, rows):
        lines.append("| " + " | ".join([label] + [cell(c, row[c]) for c in columns]) + " |")
        row_flags = []
        for c in columns:
            f = flags.get(c, {})
            row_flags.append("best" if row[c] == f.get("best") else "second" if row[c] == f.get("second") else "")
        writer.writerow([label] + [row[c] for c in columns] + row_flags)
    for label, note in (notes or {}).items():
        lines.append("| " + " | ".join([label] + [note] * len(columns)) + " |")
    if reference:
        ref_cells = [f"{reference[c]:.2f}" if c in reference else "-" for c in columns]
        lines.append("")
        lines.append(f"{REFERENCE_LABEL}: " + ", ".join(
            f"{METRIC_COLUMNS[c][0]} {v}" for c, v in zip(columns, ref_cells)))
    return Table("\n".join(lines) + "\n", buf.getvalue(), flags)


def ablation_table(reports: dict[str, MetricsReport], dataset: str) -> Table:
    """Ablation layout in published row order, plus the published numbers."""
    labels, rows, notes = [], [], {}
    for key, label in ABLATION_ROWS:
        if key in NOT_IMPLEMENTED:
            notes[label] = "not implemented"
        elif key in reports:
            labels.append(label)
            rows.append(reports[key])
    table = emit_table(rows, labels, notes=notes)
    ref_lines = ["", f"{REFERENCE_LABEL} ({dataset}):", "", "| Model | DSC | IoU | HD95 |", "|---|---|---|---|"]
    for key, label in ABLATION_ROWS:
        ref = REFERENCE["ablation"][key].get(dataset)
        if ref:
            ref_lines.append(f"| {label} | {ref['dsc']:.2f} | {ref['iou']:.2f} | {ref['hd95']:.2f} |")
    return Table(table.markdown + "\n".join(ref_lines) + "\n", table.csv, table.flags)
