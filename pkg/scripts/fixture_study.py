"""Run every protocol end to end on two synthetic datasets and write the tables.

    python scripts/fixture_study.py --out runs/fixture_study

With the random stand-in VAE the numbers only show that the plumbing works.
Pass --vae-weights (and --vae-decoder-weights) for a meaningful small run.
"""

import argparse
import logging
from pathlib import Path

from safetensors.torch import load_file, save_file

from wavegms import experiments as ex
from wavegms.data import make_fixture_dataset
from wavegms.training import TrainConfig
from wavegms.vae import FrozenVae


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/fixture_study")
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--n-train", type=int, default=12)
    parser.add_argument("--n-test", type=int, default=6)
    parser.add_argument("--vae-weights")
    parser.add_argument("--vae-decoder-weights")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    src = make_fixture_dataset(out / "data_a", args.n_train, args.n_test, args.size, seed=0, style="a")
    tgt = make_fixture_dataset(out / "data_b", args.n_train, args.n_test, args.size, seed=1, style="b")
    vae = FrozenVae.from_config(args.vae_weights, args.vae_decoder_weights, allow_standin=True)
    train = TrainConfig(epochs=args.epochs, batch_size=4, val_fraction=0.25, eval_batch_size=4)

    def config(name, dataset=src, **kw):
        return ex.ExperimentConfig(train_dataset=dataset, train=train, output_dir=str(out / name),
                                   vae=ex.VaeConfig(args.vae_weights, args.vae_decoder_weights, True), **kw)

    main_a = ex.run_main(config("main_a"), vae)
    main_b = ex.run_main(config("main_b", dataset=tgt), vae)
    table = ex.emit_table([main_a, main_b], ["fixture A", "fixture B"])
    (out / "main.md").write_text(table.markdown)

    cross = ex.run_cross_domain(config("cross_a_to_b", protocol="cross_domain", eval_datasets=[tgt]), vae)
    print(f"cross-domain A->B: {cross.summary()} (target files opened before eval: "
          f"{cross.meta['target_opened_before_eval']})")

    ablations = {"full": main_a}
    for variant in ("no_alignment", "tinyvae_trained", "batch2", "batch4"):
        ablations[variant] = ex.run_ablation(config(f"ablation_{variant}", protocol="ablation", variant=variant), vae)
    # an LMM trained on the wavelet encoder's latents, driven by VAE encoder latents instead
    lmm = {k: v for k, v in load_file(str(out / "main_a" / "best" / "model.safetensors")).items()
           if k.startswith("lmm.")}
    save_file(lmm, str(out / "lmm_from_main_a.safetensors"))
    ablations["tinyvae_model_mismatch"] = ex.run_ablation(
        config("ablation_mismatch", protocol="ablation", variant="tinyvae_model_mismatch",
               lmm_weights=str(out / "lmm_from_main_a.safetensors")), vae)
    abl = ex.ablation_table(ablations, "BUS")
    (out / "ablation.md").write_text(abl.markdown)
    print(table.markdown)
    print(abl.markdown)


if __name__ == "__main__":
    main()
