"""Latent ceiling of the pipeline: encode -> decode -> binarize ground-truth masks.

    python scripts/vae_round_trip.py --vae-weights taesd_encoder.pth \
        --vae-decoder-weights taesd_decoder.pth --dataset BUSI:data/busi --n 20
"""

import argparse

import numpy as np

from wavegms.data import DatasetSpec, load_dataset
from wavegms.metrics import dice
from wavegms.pipeline import WaveGms
from wavegms.types import binarize
from wavegms.vae import FrozenVae


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--vae-weights", required=True)
    parser.add_argument("--vae-decoder-weights")
    parser.add_argument("--dataset", required=True, help="NAME:ROOT")
    parser.add_argument("--n", type=int, default=20)
    parser.add_argument("--size", type=int, default=224)
    args = parser.parse_args()

    model = WaveGms(FrozenVae.load_pretrained(args.vae_weights, args.vae_decoder_weights))
    test = load_dataset(DatasetSpec.parse(args.dataset, args.size)).test
    scores = []
    for idx in range(min(args.n, len(test))):
        _, mask = test[idx]
        prob = model.decode_probability(model.mask_latent(mask[None]))
        scores.append(dice(binarize(prob)[0], mask))
        print(f"{test.names[idx]}: {scores[-1]:.4f}")
    print(f"mean Dice {np.mean(scores):.4f} (min {np.min(scores):.4f}) over {len(scores)} masks")


if __name__ == "__main__":
    main()
