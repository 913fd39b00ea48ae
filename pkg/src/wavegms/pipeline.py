"""End-to-end model: wavelet encoder + frozen VAE + latent mapping model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from wavegms.blocks import count_params
from wavegms.encoder import EncoderConfig, MultiResEncoder
from wavegms.lmm import LatentMappingModel, LmmConfig
from wavegms.types import DeepSupervisionBundle, binarize, broadcast_mask, check_spatial
from wavegms.vae import FrozenVae, decoded_to_mask_probability

LATENT_SOURCES = ("wavelet", "tinyvae")


@dataclass
class TrainOutputs:
    bundle: DeepSupervisionBundle
    z_mr: torch.Tensor
    z_i: torch.Tensor
    z_m: torch.Tensor


class WaveGms(nn.Module):
    """Trainable encoder and LMM around one shared frozen VAE.

    ``latent_source="tinyvae"`` drops the wavelet encoder and feeds the VAE
    image latent straight into the LMM (the Tiny-VAE baselines).
    """

    def __init__(
        self,
        vae: FrozenVae,
        encoder_config: EncoderConfig | None = None,
        lmm_config: LmmConfig | None = None,
        latent_source: str = "wavelet",
    ):
        super().__init__()
        if latent_source not in LATENT_SOURCES:
            raise ValueError(f"latent_source must be one of {LATENT_SOURCES}")
        self.latent_source = latent_source
        self.encoder = MultiResEncoder(encoder_config) if latent_source == "wavelet" else None
        self.lmm = LatentMappingModel(lmm_config)
        self.vae = vae.freeze()

    def train(self, mode: bool = True) -> "WaveGms":
        super().train(mode)
        self.vae.train(False)
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def param_report(self) -> dict[str, int]:
        vae = self.vae.param_counts()
        enc = count_params(self.encoder) if self.encoder is not None else 0
        lmm = count_params(self.lmm)
        return {
            "encoder": enc,
            "lmm": lmm,
            "trainable": enc + lmm,
            "vae_encoder": vae["encoder"],
            "vae_decoder": vae["decoder"],
            "frozen": vae["encoder"] + vae["decoder"],
        }

    def image_latent(self, img: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.vae.encode(img)

    def mask_latent(self, mask: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.vae.encode(broadcast_mask(mask) * 2.0 - 1.0)

    def source_latent(self, img: torch.Tensor, z_i: torch.Tensor | None = None) -> torch.Tensor:
        if self.encoder is not None:
            return self.encoder(img)
        return z_i if z_i is not None else self.image_latent(img)

    def decode_probability(self, z: torch.Tensor) -> torch.Tensor:
        return decoded_to_mask_probability(self.vae.decode(z))

    def forward_train(self, img: torch.Tensor, mask: torch.Tensor) -> TrainOutputs:
        """``img`` signed range [B, 3, H, W]; ``mask`` binary [B, 1, H, W]."""
        check_spatial(img)
        z_i = self.image_latent(img)
        z_m = self.mask_latent(mask)
        z_mr = self.source_latent(img, z_i)
        bundle = self.lmm(z_mr)
        # one decoder pass per stage keeps the final stage bit-identical to inference
        bundle.stage_masks = [self.decode_probability(z) for z in bundle.stage_latents]
        return TrainOutputs(bundle, z_mr, z_i, z_m)

    forward = forward_train

    def predict_probability(self, img: torch.Tensor) -> torch.Tensor:
        check_spatial(img)
        z = self.source_latent(img)
        return self.decode_probability(self.lmm.forward_inference(z))

    @torch.no_grad()
    def forward_infer(self, img: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
        return binarize(self.predict_probability(img), threshold)
