"""Dataset ingestion, splits, augmentation and synthetic fixtures.

Directory layouts (``root`` is the dataset directory):

* ``BUS``:  ``original/<stem>.png`` with ``GT/<stem>.png``.
* ``BUSI``: ``{benign,malignant,normal}/<stem>.png`` with ``<stem>_mask.png``
  and optional extra ``<stem>_mask_<k>.png`` files (merged by union).
  ``normal`` is skipped unless ``include_normal`` is set.
* ``KvasirInstrument``: ``images/<stem>.jpg`` with ``masks/<stem>.png``.
* ``HAM10000``: ``images/<stem>.jpg`` with ``masks/<stem>_segmentation.png``.
* ``folder``: ``images/<stem>.*`` with ``masks/<stem>.*``; any size.

When ``train.txt`` and ``test.txt`` (one stem per line) exist in ``root``
they define the split. Otherwise a seeded split with the published sizes is
drawn (for ``folder``: 20% test).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from wavegms.types import DEFAULT_SIZE

SPLIT_SIZES = {
    "BUS": (132, 31),
    "BUSI": (517, 130),
    "KvasirInstrument": (472, 118),
    "HAM10000": (8015, 2000),
}
DATASET_NAMES = tuple(SPLIT_SIZES) + ("folder",)
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLIT_SEED = 2333


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    name: str
    root: str
    size: int = DEFAULT_SIZE
    include_normal: bool = False
    test_fraction: float = 0.2  # folder layout without split lists only

    def __post_init__(self) -> None:
        if self.name not in DATASET_NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; choose from {DATASET_NAMES}")
        if self.size % 8:
            raise ValueError(f"size {self.size} is not divisible by 8")

    @classmethod
    def parse(cls, text: str, size: int = DEFAULT_SIZE) -> "DatasetSpec":
        """``NAME:ROOT`` (e.g. ``BUSI:/data/busi``) or a bare root (folder layout)."""
        name, sep, root = text.partition(":")
        if sep and name in DATASET_NAMES:
            return cls(name, root, size=size)
        return cls("folder", text, size=size)


class LoaderAudit:
    """Ordered log of file opens and phase markers."""

    def __init__(self):
        self.events: list[tuple[str, str]] = []

    def mark(self, label: str) -> None:
        self.events.append(("mark", label))

    def record(self, path: Path) -> None:
        self.events.append(("open", str(Path(path).resolve())))

    def opened_under(self, root: str | Path, before: str | None = None) -> list[str]:
        root = str(Path(root).resolve())
        hits = []
        for kind, value in self.events:
            if kind == "mark" and value == before:
                break
            if kind == "open" and (value == root or value.startswith(root + "/")):
                hits.append(value)
        return hits


@dataclass
class Sample:
    name: str
    image: Path
    masks: list[Path]


def _find(directory: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DatasetError(f"missing directory {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _pair_dirs(img_dir: Path, mask_dir: Path, suffix: str = "") -> list[Sample]:
    out = []
    for img in _images(img_dir):
        mask = _find(mask_dir, img.stem + suffix)
        if mask is None:
            raise DatasetError(f"no mask for image {img} in {mask_dir}")
        out.append(Sample(img.stem, img, [mask]))
    return out


def _busi_samples(root: Path, include_normal: bool) -> list[Sample]:
    classes = ["benign", "malignant"] + (["normal"] if include_normal else [])
    out = []
    for cls in classes:
        d = root / cls
        files = _images(d)
        for img in files:
            if "_mask" in img.stem:
                continue
            masks = sorted(p for p in files if p.stem == f"{img.stem}_mask" or p.stem.startswith(f"{img.stem}_mask_"))
            if not masks:
                raise DatasetError(f"no mask for image {img}")
            out.append(Sample(f"{cls}/{img.stem}", img, masks))
    return out


def discover(spec: DatasetSpec) -> list[Sample]:
    """List image/mask pairs without opening any file; sorted by name."""
    root = Path(spec.root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if spec.name == "BUS":
        samples = _pair_dirs(root / "original", root / "GT")
    elif spec.name == "BUSI":
        samples = _busi_samples(root, spec.include_normal)
    elif spec.name == "HAM10000":
        samples = _pair_dirs(root / "images", root / "masks", "_segmentation")
    else:
        samples = _pair_dirs(root / "images", root / "masks")
    return sorted(samples, key=lambda s: s.name)


def _read_list(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def split_samples(spec: DatasetSpec, samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    root = Path(spec.root)
    expected = SPLIT_SIZES.get(spec.name)
    if expected and len(samples) != sum(expected):
        raise DatasetError(
            f"{spec.name}: expected {sum(expected)} image/mask pairs, found {len(samples)}"
        )
    by_name = {s.name: s for s in samples}
    if (root / "train.txt").exists() and (root / "test.txt").exists():
        parts = []
        for fname in ("train.txt", "test.txt"):
            names = _read_list(root / fname)
            unknown = [n for n in names if n not in by_name]
            if unknown:
                raise DatasetError(f"{fname} lists unknown samples: {unknown[:5]}")
            parts.append([by_name[n] for n in names])
        train, test = parts
        if {s.name for s in train} & {s.name for s in test}:
            raise DatasetError("train.txt and test.txt overlap")
    else:
        n_test = expected[1] if expected else max(1, int(round(len(samples) * spec.test_fraction)))
        order = np.random.default_rng(SPLIT_SEED).permutation(len(samples))
        test_idx = set(order[:n_test].tolist())
        train = [s for i, s in enumerate(samples) if i not in test_idx]
        test = [s for i, s in enumerate(samples) if i in test_idx]
    if expected and (len(train), len(test)) != expected:
        raise DatasetError(
            f"{spec.name}: expected {expected[0]}/{expected[1]} train/test, got {len(train)}/{len(test)}"
        )
    return train, test


def read_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        return np.array(im, dtype=np.uint8)


def read_mask(paths: list[Path], size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=bool)
    for path in paths:
        with Image.open(path) as im:
            arr = np.array(im.convert("L").resize((size, size), Image.NEAREST))
        out |= arr > (0 if arr.max() <= 1 else 127)
    return out


class SegmentationDataset(torch.utils.data.Dataset):
    """Indexed (image, mask) pairs: image [3, S, S] in [0, 1], mask [1, S, S] in {0, 1}."""

    def __init__(self, samples: list[Sample], size: int = DEFAULT_SIZE,
                 audit: LoaderAudit | None = None, cache: bool = True, _cache: dict | None = None):
        self.samples = list(samples)
        self.size = size
        self.audit = audit
        self.cache = cache
        self._cache = {} if _cache is None else _cache

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.samples]

    def files(self) -> set[Path]:
        return {p.resolve() for s in self.samples for p in [s.image, *s.masks]}

    def _load(self, s: Sample) -> tuple[np.ndarray, np.ndarray]:
        if s.name in self._cache:
            return self._cache[s.name]
        if self.audit is not None:
            for p in [s.image, *s.masks]:
                self.audit.record(p)
        pair = (read_image(s.image, self.size), read_mask(s.masks, self.size))
        if self.cache:
            self._cache[s.name] = pair
        return pair

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        img, mask = self._load(self.samples[idx])
        img_t = torch.from_numpy(img).permute(2, 0, 1).float() / 255.0
        mask_t = torch.from_numpy(mask).float()[None]
        return img_t, mask_t

    def subset(self, indices) -> "SegmentationDataset":
        return SegmentationDataset([self.samples[i] for i in indices], self.size,
                                   self.audit, self.cache, self._cache)


@dataclass
class DatasetSplits:
    train: SegmentationDataset
    test: SegmentationDataset
    spec: DatasetSpec


def load_dataset(spec: DatasetSpec, audit: LoaderAudit | None = None, cache: bool = True) -> DatasetSplits:
    """Index a dataset and its split. Files are opened lazily, on first access."""
    train, test = split_samples(spec, discover(spec))
    return DatasetSplits(
        SegmentationDataset(train, spec.size, audit, cache),
        SegmentationDataset(test, spec.size, audit, cache),
        spec,
    )


def make_validation_split(train: SegmentationDataset, fraction: float, seed: int = SPLIT_SEED):
    """Seeded carve-out: validation gets floor(n * fraction) items."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(train)
    n_val = math.floor(n * fraction)
    if n_val == 0 or n_val == n:
        raise ValueError(f"fraction {fraction} of {n} items leaves an empty split")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    keep = sorted(order[n_val:].tolist())
    return train.subset(keep), train.subset(val_idx)


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentationPolicy:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_degrees: float = 15.0
    hue: float = 0.02
    saturation: float = 0.2
    value: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def hsv_jitter(img: torch.Tensor, dh: float, ds: float, dv: float) -> torch.Tensor:
    hsv = rgb_to_hsv(img.permute(1, 2, 0).clamp(0, 1).numpy())
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * dv, 0.0, 1.0)
    return torch.from_numpy(hsv_to_rgb(hsv)).permute(2, 0, 1).to(img.dtype)


def augment(img: torch.Tensor, mask: torch.Tensor, policy: AugmentationPolicy,
            rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Shared flips/rotation on both tensors, HSV jitter on the image only.

    ``img`` is [3, H, W] in [0, 1]; ``mask`` is [1, H, W] binary.
    """
    if rng.random() < policy.hflip_p:
        img, mask = img.flip(-1), mask.flip(-1)
    if rng.random() < policy.vflip_p:
        img, mask = img.flip(-2), mask.flip(-2)
    if policy.rotation_degrees > 0:
        angle = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
        img = TF.rotate(img, angle, interpolation=TF.InterpolationMode.BILINEAR)
        mask = TF.rotate(mask, angle, interpolation=TF.InterpolationMode.NEAREST)
        mask = (mask > 0.5).to(img.dtype)
    if policy.hue or policy.saturation or policy.value:
        dh = rng.uniform(-policy.hue, policy.hue)
        ds = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        dv = rng.uniform(1 - policy.value, 1 + policy.value)
        img = hsv_jitter(img, dh, ds, dv)
    return img, mask


def iterate_batches(dataset: SegmentationDataset, batch_size: int, *, shuffle: bool = False,
                    seed: int = SPLIT_SEED, epoch: int = 0,
                    policy: AugmentationPolicy | None = None):
    """Yield ``(images, masks, names)``; order and augmentation depend only on (seed, epoch)."""
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size].tolist()
        imgs, masks = [], []
        for i in idx:
            img, mask = dataset[i]
            if policy is not None:
                img, mask = augment(img, mask, policy, sample_rng(seed, epoch, i))
            imgs.append(img)
            masks.append(mask)
        yield torch.stack(imgs), torch.stack(masks), [dataset.samples[i].name for i in idx]


# -- synthetic fixtures --------------------------------------------------------


def _fixture_pair(rng: np.random.Generator, size: int, style: str) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    ry, rx = rng.uniform(0.12, 0.28, 2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if style == "a":
        base, lesion, noise, tint = 0.25, 0.8, 0.08, np.array([1.0, 0.9, 0.8])
    else:
        base, lesion, noise, tint = 0.7, 0.2, 0.12, np.array([0.8, 0.9, 1.0])
    gray = np.where(mask, lesion, base) + rng.normal(0, noise, (size, size))
    img = np.clip(gray[..., None] * tint, 0, 1)
    return (img * 255).astype(np.uint8), mask.astype(np.uint8) * 255


def make_fixture_dataset(root: str | Path, n_train: int = 8, n_test: int = 4, size: int = 32,
                         seed: int = 0, style: str = "a") -> DatasetSpec:
    """Write a tiny ellipse-lesion dataset in the ``folder`` layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = [f"case_{i:03d}" for i in range(n_train + n_test)]
    for name in names:
        img, mask = _fixture_pair(rng, size, style)
        Image.fromarray(img).save(root / "images" / f"{name}.png")
        Image.fromarray(mask).save(root / "masks" / f"{name}.png")
    (root / "train.txt").write_text("\n".join(names[:n_train]) + "\n")
    (root / "test.txt").write_text("\n".join(names[n_train:]) + "\n")
    return DatasetSpec("folder", str(root), size=size)
