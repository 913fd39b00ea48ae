"""Overfit a handful of training images and report Dice along the way.

    python scripts/overfit_smoke.py --dataset BUSI:data/busi --vae-weights ... --steps 200

Also checks that the 10-step moving average of the total loss never rises
by more than --slack between consecutive windows.
"""

import argparse

import numpy as np

from wavegms.data import AugmentationPolicy, DatasetSpec, iterate_batches, load_dataset
from wavegms.metrics import dice
from wavegms.training import TrainConfig, build_model, make_optimizer, predict, train_step
from wavegms.vae import FrozenVae


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--size", type=int, default=224)
    parser.add_argument("--vae-weights")
    parser.add_argument("--vae-decoder-weights")
    parser.add_argument("--allow-standin", action="store_true")
    parser.add_argument("--images", type=int, default=8)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--micro-batch", type=int)
    parser.add_argument("--device", default="auto")
    parser.add_argument("--slack", type=float, default=0.05)
    args = parser.parse_args()

    vae = FrozenVae.from_config(args.vae_weights, args.vae_decoder_weights, args.allow_standin)
    subset = load_dataset(DatasetSpec.parse(args.dataset, args.size)).train.subset(range(args.images))
    cfg = TrainConfig(batch_size=args.images, epochs=args.steps, device=args.device, micro_batch=args.micro_batch)
    model = build_model(cfg, vae)
    device = next(model.parameters()).device
    opt, _ = make_optimizer(model, cfg)
    imgs, masks, _ = next(iterate_batches(subset, args.images, policy=AugmentationPolicy.identity()))
    imgs, masks = imgs.to(device), masks.to(device)
    losses = []
    for step in range(1, args.steps + 1):
        losses.append(train_step(model, opt, imgs, masks, micro_batch=cfg.micro_batch).total.item())
        if step % 20 == 0:
            score = np.mean([dice(p, m) for p, m in zip(predict(model, imgs), masks.cpu())])
            print(f"step {step:4d} loss {losses[-1]:.4f} train Dice {score:.4f}")
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    rises = int(np.sum(np.diff(avg) > args.slack))
    print(f"moving-average rises above slack: {rises}")


if __name__ == "__main__":
    main()
