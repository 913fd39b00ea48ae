"""Command line entry point: ``wavegms <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from wavegms import experiments as ex
from wavegms.data import DatasetSpec, load_dataset, make_fixture_dataset, make_validation_split, read_image, read_mask
from wavegms.metrics import evaluate_dataset
from wavegms.training import evaluate, fit, load_checkpoint, read_manifest
from wavegms.vae import FrozenVae, VaeLoadError, VaeWeightsNotFound
from wavegms.wavelet import SUBBANDS, multires_decompose


def _add_vae_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vae-weights", help="encoder (or combined) VAE weight file")
    p.add_argument("--vae-decoder-weights", help="decoder weight file for two-file releases")
    p.add_argument("--allow-standin", action="store_true",
                   help="fall back to the seeded random VAE when no weights are available")


def _vae_from_args(args, cfg: ex.ExperimentConfig | None = None) -> FrozenVae:
    if args.vae_weights or args.allow_standin or cfg is None:
        return FrozenVae.from_config(args.vae_weights, args.vae_decoder_weights, args.allow_standin)
    return cfg.vae.build()


def cmd_decompose(args) -> int:
    img = torch.from_numpy(read_image(Path(args.image), args.size)).permute(2, 0, 1).float()[None] / 255.0
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for level in multires_decompose(img * 2 - 1).levels:
        for name, band in zip(SUBBANDS, level.bands()):
            arr = band[0].permute(1, 2, 0).numpy()
            lo, hi = arr.min(), arr.max()
            scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
            Image.fromarray((scaled * 255).astype(np.uint8)).save(out / f"level{level.level}_{name}.png")
    print(f"wrote {3 * len(SUBBANDS)} subband images to {out}")
    return 0


def cmd_metrics(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    names = sorted(p.name for p in gt_dir.iterdir() if p.is_file())
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        print(f"missing predictions for: {missing[:5]}", file=sys.stderr)
        return 2
    preds, gts = [], []
    for n in names:
        with Image.open(gt_dir / n) as im:
            size = im.size
        if size[0] != size[1]:
            print(f"{n}: non-square masks are not supported", file=sys.stderr)
            return 2
        gts.append(read_mask([gt_dir / n], size[0]).astype(np.uint8))
        preds.append(read_mask([pred_dir / n], size[0]).astype(np.uint8))
    report = evaluate_dataset(preds, gts, names)
    out_csv = Path(args.out_csv or pred_dir.parent / "per_image.csv")
    with out_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, ["name", "dice", "iou", "hd95"])
        writer.writeheader()
        writer.writerows(report.per_image)
    out_json = Path(args.out_json or pred_dir.parent / "metrics.json")
    out_json.write_text(json.dumps(report.summary(), indent=1))
    print(json.dumps(report.summary()))
    return 0


def cmd_train(args) -> int:
    cfg = ex.load_config(args.config, output_dir=args.out)
    vae = _vae_from_args(args, cfg)
    train_cfg = cfg.variant_train_config()
    splits = load_dataset(cfg.train_dataset)
    train_ds, val_ds = make_validation_split(splits.train, train_cfg.val_fraction, train_cfg.seed)
    result = fit(train_cfg, train_ds, val_ds, vae, cfg.output_dir, resume=args.resume)
    print(json.dumps({"best": str(result.best_dir), "best_val_dice": result.best_val_dice,
                      "best_epoch": result.best_epoch}))
    return 0


def cmd_eval(args) -> int:
    vae = _vae_from_args(args)
    manifest = read_manifest(args.ckpt)
    size = args.size or None
    model, _ = load_checkpoint(args.ckpt, vae, device=args.device)
    spec = DatasetSpec.parse(args.dataset, size=size or 224)
    report = evaluate(model, load_dataset(spec).test)
    report.meta.update({"checkpoint": str(args.ckpt), "eval_dataset": spec.name,
                        "label": args.label or f"{Path(args.ckpt).parent.name}->{spec.name}",
                        "train_config": manifest["config"]})
    ref = ex.REFERENCE["main"].get(spec.name)
    if ref:
        report.meta[ex.REFERENCE_LABEL] = ref
    out = Path(args.out or Path(args.ckpt).parent / f"eval_{spec.name}")
    ex.save_report(report, out)
    print(json.dumps(report.summary()))
    return 0


def _protocol_cmd(args, protocol: str, **overrides) -> int:
    cfg = ex.load_config(args.config, protocol=protocol, output_dir=args.out, **overrides)
    report = ex.run(cfg, _vae_from_args(args, cfg))
    print(json.dumps({**report.summary(), **{k: v for k, v in report.meta.items() if k != "label"}}))
    return 0


def cmd_cross_eval(args) -> int:
    size = args.size or 224
    train = DatasetSpec.parse(args.train, size).__dict__
    evaluated = DatasetSpec.parse(args.eval, size).__dict__
    return _protocol_cmd(args, "cross_domain", train_dataset=train, eval_datasets=[evaluated])


def cmd_ablate(args) -> int:
    return _protocol_cmd(args, "ablation", variant=args.variant, lmm_weights=args.lmm_weights)


def cmd_table(args) -> int:
    reports = [ex.load_report(p) for p in args.reports]
    labels = args.labels.split(",") if args.labels else None
    table = ex.emit_table(reports, labels, reference=reports[0].meta.get(ex.REFERENCE_LABEL))
    if args.out:
        Path(args.out).with_suffix(".md").write_text(table.markdown)
        Path(args.out).with_suffix(".csv").write_text(table.csv)
    print(table.markdown, end="")
    return 0


def cmd_make_fixture(args) -> int:
    spec = make_fixture_dataset(args.root, args.n_train, args.n_test, args.size, args.seed, args.style)
    print(f"fixture dataset at {spec.root} ({args.n_train} train / {args.n_test} test, {args.size}px)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavegms", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="write the 3-level Haar subbands of an image")
    p.add_argument("image")
    p.add_argument("out_dir")
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("metrics", help="DSC/IoU/HD95 between two mask directories")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint directory (usually <out>/last)")
    p.add_argument("--out", help="override output_dir")
    _add_vae_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="NAME:ROOT or a folder-layout root")
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    p.add_argument("--label")
    p.add_argument("--device", default="cpu")
    _add_vae_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval", help="train on one dataset, evaluate on another")
    p.add_argument("--train", required=True, help="NAME:ROOT")
    p.add_argument("--eval", required=True, help="NAME:ROOT")
    p.add_argument("--config", required=True, help="run config supplying train settings")
    p.add_argument("--size", type=int)
    p.add_argument("--out")
    _add_vae_args(p)
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("ablate", help="run one ablation variant")
    p.add_argument("--variant", required=True, choices=ex.VARIANTS)
    p.add_argument("--config", required=True)
    p.add_argument("--lmm-weights", help="external LMM weights (model-mismatch variant)")
    p.add_argument("--out")
    _add_vae_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("table", help="markdown/CSV table from metrics.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", help="comma-separated row labels")
    p.add_argument("--out", help="path stem for .md and .csv outputs")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("make-fixture", help="write a tiny synthetic dataset")
    p.add_argument("root")
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=("a", "b"), default="a")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (VaeWeightsNotFound, VaeLoadError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
