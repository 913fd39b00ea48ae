"""Frozen compact VAE (TAESD architecture) behind a signed-range interface.

The network layout reproduces the public ``taesd_encoder.pth`` /
``taesd_decoder.pth`` release exactly, so those weights load without
renaming. Internally the networks work on [0, 1] images; this adapter
converts from and to the signed [-1, 1] convention used by the pipeline.

Accepted weight formats (see :func:`convert_state_dict`):

* the archive written by :meth:`FrozenVae.save` (``encoder.*`` / ``decoder.*``
  keys in a safetensors file with a JSON manifest next to it);
* the original release: two files whose keys carry no prefix
  (``0.weight``, ``1.conv.0.weight`` ...); pass both paths;
* a single diffusers ``AutoencoderTiny`` file (``encoder.layers.N.*``,
  ``decoder.layers.N.*``). Its decoder omits the leading clamp module, so
  decoder indices are shifted by one on import.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import torch
from torch import nn

from wavegms.types import LATENT_CHANNELS, check_range, check_spatial, to_unit_range

STANDIN_SEED = 0


DOWNLOAD_HINT = (
    "Download the pretrained tiny autoencoder (taesd_encoder.pth and taesd_decoder.pth, "
    "or a diffusers AutoencoderTiny safetensors file) and pass its path."
)


class VaeWeightsNotFound(FileNotFoundError):
    pass


class VaeLoadError(RuntimeError):
    pass


class VaeArchitectureError(VaeLoadError):
    pass


def _conv(n_in: int, n_out: int, **kwargs) -> nn.Conv2d:
    return nn.Conv2d(n_in, n_out, 3, padding=1, **kwargs)


class Clamp(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x / 3) * 3


class Block(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.conv = nn.Sequential(
            _conv(n_in, n_out), nn.ReLU(), _conv(n_out, n_out), nn.ReLU(), _conv(n_out, n_out)
        )
        self.skip = nn.Conv2d(n_in, n_out, 1, bias=False) if n_in != n_out else nn.Identity()
        self.fuse = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.conv(x) + self.skip(x))


def tiny_encoder(latent_channels: int = LATENT_CHANNELS) -> nn.Sequential:
    return nn.Sequential(
        _conv(3, 64), Block(64, 64),
        _conv(64, 64, stride=2, bias=False), Block(64, 64), Block(64, 64), Block(64, 64),
        _conv(64, 64, stride=2, bias=False), Block(64, 64), Block(64, 64), Block(64, 64),
        _conv(64, 64, stride=2, bias=False), Block(64, 64), Block(64, 64), Block(64, 64),
        _conv(64, latent_channels),
    )


def tiny_decoder(latent_channels: int = LATENT_CHANNELS) -> nn.Sequential:
    return nn.Sequential(
        Clamp(), _conv(latent_channels, 64), nn.ReLU(),
        Block(64, 64), Block(64, 64), Block(64, 64), nn.Upsample(scale_factor=2), _conv(64, 64, bias=False),
        Block(64, 64), Block(64, 64), Block(64, 64), nn.Upsample(scale_factor=2), _conv(64, 64, bias=False),
        Block(64, 64), Block(64, 64), Block(64, 64), nn.Upsample(scale_factor=2), _conv(64, 64, bias=False),
        Block(64, 64), _conv(64, 3),
    )


def convert_state_dict(
    state: dict[str, torch.Tensor], part: str | None = None
) -> dict[str, torch.Tensor]:
    """Normalize any supported key layout to ``encoder.*`` / ``decoder.*``.

    ``part`` names the half when ``state`` comes from an unprefixed
    original-release file.
    """
    out = {}
    for key, value in state.items():
        m = re.match(r"^(encoder|decoder)\.layers\.(\d+)\.(.*)$", key)
        if m:
            half, idx, rest = m.group(1), int(m.group(2)), m.group(3)
            if half == "decoder":
                idx += 1
            out[f"{half}.{idx}.{rest}"] = value
        elif key.startswith(("encoder.", "decoder.")):
            out[key] = value
        elif part in ("encoder", "decoder"):
            out[f"{part}.{key}"] = value
        else:
            # unprefixed keys with no hint, or unrelated tensors (e.g. diffusers'
            # quant layers): reported as unexpected by the strict load
            out[key] = value
    return out


def _read_tensors(path: Path) -> dict[str, torch.Tensor]:
    try:
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            return load_file(str(path))
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt archive or wrong format
        raise VaeLoadError(f"could not read VAE weights from {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise VaeLoadError(f"{path} does not contain a tensor mapping")
    return state


def _fingerprint(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class FrozenVae(nn.Module):
    """Deterministic latent codec; parameters never require grad."""

    downsample = 8

    def __init__(self):
        super().__init__()
        self.encoder = tiny_encoder()
        self.decoder = tiny_decoder()
        self.pretrained = False
        self.source: str = "uninitialized"
        self.encode_calls = 0
        self.decode_calls = 0
        self.freeze()

    def freeze(self) -> "FrozenVae":
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True) -> "FrozenVae":
        return super().train(False)

    # -- construction -------------------------------------------------------

    @classmethod
    def standin(cls, seed: int = STANDIN_SEED) -> "FrozenVae":
        """Same architecture, seeded random weights. For tests and CI only."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            vae = cls()
        vae.source = f"random-standin(seed={seed})"
        return vae

    @classmethod
    def load_pretrained(
        cls, path: str | Path, decoder_path: str | Path | None = None
    ) -> "FrozenVae":
        paths = [Path(path)] + ([Path(decoder_path)] if decoder_path else [])
        for p in paths:
            if not p.exists():
                raise VaeWeightsNotFound(f"VAE weights not found at {p}. {DOWNLOAD_HINT}")
        if decoder_path:
            state = convert_state_dict(_read_tensors(paths[0]), "encoder")
            state.update(convert_state_dict(_read_tensors(paths[1]), "decoder"))
        else:
            state = convert_state_dict(_read_tensors(paths[0]))
        vae = cls()
        vae._load_strict(state)
        vae.pretrained = True
        vae.source = ",".join(str(p) for p in paths)
        return vae

    @classmethod
    def from_config(
        cls, weights: str | None, decoder_weights: str | None = None, allow_standin: bool = False
    ) -> "FrozenVae":
        if weights:
            try:
                return cls.load_pretrained(weights, decoder_weights)
            except VaeWeightsNotFound:
                if not allow_standin:
                    raise
        elif not allow_standin:
            raise VaeWeightsNotFound(f"no VAE weights configured. {DOWNLOAD_HINT} "
                                     "Use the random stand-in only for plumbing checks.")
        return cls.standin()

    def _load_strict(self, state: dict[str, torch.Tensor]) -> None:
        own = self.state_dict()
        problems = []
        for name in sorted(set(own) - set(state)):
            problems.append(f"missing {name} {tuple(own[name].shape)}")
        for name in sorted(set(state) - set(own)):
            problems.append(f"unexpected {name} {tuple(state[name].shape)}")
        for name in sorted(set(own) & set(state)):
            if own[name].shape != state[name].shape:
                problems.append(
                    f"shape {name}: expected {tuple(own[name].shape)}, got {tuple(state[name].shape)}"
                )
        if problems:
            raise VaeArchitectureError("VAE weights do not match the architecture:\n  " + "\n  ".join(problems))
        # validated up front, so this cannot leave the module half-loaded
        self.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
        self.freeze()

    def save(self, path: str | Path) -> Path:
        from safetensors.torch import save_file

        path = Path(path).with_suffix(".safetensors")
        state = {k: v.contiguous() for k, v in self.state_dict().items()}
        save_file(state, str(path))
        manifest = {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
        return path

    # -- bookkeeping ---------------------------------------------------------

    def fingerprint(self) -> str:
        return _fingerprint(self.state_dict())

    def param_counts(self) -> dict[str, int]:
        return {
            "encoder": sum(p.numel() for p in self.encoder.parameters()),
            "decoder": sum(p.numel() for p in self.decoder.parameters()),
        }

    # -- codec ---------------------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Signed-range [B, 3, H, W] -> latent [B, 4, H/8, W/8]."""
        check_spatial(x, self.downsample)
        if x.shape[1] != 3:
            raise ValueError(f"VAE encoder expects 3 channels, got {x.shape[1]}")
        self.encode_calls += 1
        return self.encoder(to_unit_range(x))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent [B, 4, h, w] -> signed-range [B, 3, 8h, 8w], clamped to [-1, 1]."""
        if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS:
            raise ValueError(f"expected a [B, {LATENT_CHANNELS}, h, w] latent, got {tuple(z.shape)}")
        self.decode_calls += 1
        return (self.decoder(z) * 2.0 - 1.0).clamp(-1.0, 1.0)


def decoded_to_mask_probability(decoded: torch.Tensor) -> torch.Tensor:
    """Signed [B, 3, H, W] decode -> [B, 1, H, W] probability via channel mean."""
    check_range(decoded, -1.0, 1.0, "decoded image")
    return (decoded.mean(dim=1, keepdim=True) + 1.0) * 0.5
