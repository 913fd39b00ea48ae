import numpy as np
import pytest
import torch
from PIL import Image

from wavegms.data import (
    AugmentationPolicy,
    DatasetError,
    DatasetSpec,
    augment,
    iterate_batches,
    load_dataset,
    make_fixture_dataset,
    make_validation_split,
    sample_rng,
)


def touch_pairs(img_dir, mask_dir, stems, img_ext=".png", mask_suffix="", mask_ext=".png"):
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in stems:
        (img_dir / f"{s}{img_ext}").touch()
        (mask_dir / f"{s}{mask_suffix}{mask_ext}").touch()


def test_fixture_directory_contract(tmp_path):
    spec = make_fixture_dataset(tmp_path, n_train=2, n_test=1, size=32)
    spec.size = 224
    splits = load_dataset(spec)
    pairs = [splits.train[i] for i in range(len(splits.train))] + [splits.test[0]]
    assert len(pairs) == 3
    for img, mask in pairs:
        assert img.shape == (3, 224, 224) and mask.shape == (1, 224, 224)
        assert 0 <= img.min() and img.max() <= 1
        assert torch.all((mask == 0) | (mask == 1))


def test_bus_counts(tmp_path):
    touch_pairs(tmp_path / "original", tmp_path / "GT", [f"{i:06d}" for i in range(163)])
    splits = load_dataset(DatasetSpec("BUS", str(tmp_path)))
    assert (len(splits.train), len(splits.test)) == (132, 31)
    assert not set(splits.train.names) & set(splits.test.names)


def test_ham10000_counts(tmp_path):
    stems = [f"ISIC_{i:07d}" for i in range(10015)]
    touch_pairs(tmp_path / "images", tmp_path / "masks", stems, ".jpg", "_segmentation")
    splits = load_dataset(DatasetSpec("HAM10000", str(tmp_path)))
    assert (len(splits.train), len(splits.test)) == (8015, 2000)


def test_busi_layout_skips_normal_and_merges_masks(tmp_path):
    for cls, n in (("benign", 437), ("malignant", 210), ("normal", 133)):
        d = tmp_path / cls
        d.mkdir()
        for i in range(n):
            (d / f"{cls} ({i}).png").touch()
            (d / f"{cls} ({i})_mask.png").touch()
    (tmp_path / "benign" / "benign (0)_mask_1.png").touch()
    splits = load_dataset(DatasetSpec("BUSI", str(tmp_path)))
    assert (len(splits.train), len(splits.test)) == (517, 130)
    all_samples = splits.train.samples + splits.test.samples
    assert not any(s.name.startswith("normal") for s in all_samples)
    merged = next(s for s in all_samples if s.name == "benign/benign (0)")
    assert len(merged.masks) == 2


def test_busi_mask_union(tmp_path):
    d = tmp_path / "benign"
    d.mkdir()
    (tmp_path / "malignant").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(d / "a.png")
    m1 = np.zeros((8, 8), np.uint8)
    m1[:4] = 255
    m2 = np.zeros((8, 8), np.uint8)
    m2[:, :4] = 255
    Image.fromarray(m1).save(d / "a_mask.png")
    Image.fromarray(m2).save(d / "a_mask_1.png")
    from wavegms.data import discover, SegmentationDataset

    samples = discover(DatasetSpec("BUSI", str(tmp_path), size=8))
    _, mask = SegmentationDataset(samples, 8)[0]
    assert mask.sum().item() == 64 - 16


def test_count_mismatch_reports_numbers(tmp_path):
    touch_pairs(tmp_path / "original", tmp_path / "GT", [f"{i}" for i in range(10)])
    with pytest.raises(DatasetError, match="163"):
        load_dataset(DatasetSpec("BUS", str(tmp_path)))


def test_missing_mask_names_file(tmp_path):
    touch_pairs(tmp_path / "images", tmp_path / "masks", ["a", "b"])
    (tmp_path / "images" / "c.png").touch()
    with pytest.raises(DatasetError, match="c.png"):
        load_dataset(DatasetSpec("folder", str(tmp_path)))


def test_split_lists_are_used(tmp_path):
    touch_pairs(tmp_path / "images", tmp_path / "masks", ["a", "b", "c"], ".jpg")
    (tmp_path / "train.txt").write_text("c\na\n")
    (tmp_path / "test.txt").write_text("b\n")
    splits = load_dataset(DatasetSpec("folder", str(tmp_path)))
    assert splits.train.names == ["c", "a"] and splits.test.names == ["b"]


def test_loader_determinism(fixture_a):
    a, b = load_dataset(fixture_a), load_dataset(fixture_a)
    assert a.train.names == b.train.names
    for i in range(len(a.train)):
        assert all(torch.equal(x, y) for x, y in zip(a.train[i], b.train[i]))


def test_masks_binary_after_resize(fixture_a):
    spec = DatasetSpec("folder", fixture_a.root, size=24)
    ds = load_dataset(spec).train
    for i in range(len(ds)):
        _, m = ds[i]
        assert m.shape == (1, 24, 24)
        assert torch.all((m == 0) | (m == 1))


def test_validation_split(tmp_path):
    touch_pairs(tmp_path / "original", tmp_path / "GT", [f"{i:06d}" for i in range(163)])
    train = load_dataset(DatasetSpec("BUS", str(tmp_path))).train
    tr, va = make_validation_split(train, 0.1, 2333)
    assert (len(tr), len(va)) == (119, 13)
    assert not set(tr.names) & set(va.names)
    tr2, va2 = make_validation_split(train, 0.1, 2333)
    assert va.names == va2.names
    _, va3 = make_validation_split(train, 0.1, 7)
    assert va3.names != va.names
    with pytest.raises(ValueError):
        make_validation_split(train, 0.001, 0)
    with pytest.raises(ValueError):
        make_validation_split(train, 1.0, 0)


def disk(size=64, radius=18):
    yy, xx = np.mgrid[:size, :size]
    return torch.from_numpy(((yy - size / 2) ** 2 + (xx - size / 2) ** 2 <= radius ** 2).astype(np.float32))[None]


def test_identity_policy_is_noop():
    img, mask = torch.rand(3, 16, 16), disk(16, 5)
    out_img, out_mask = augment(img, mask, AugmentationPolicy.identity(), sample_rng(0, 0, 0))
    assert torch.equal(out_img, img) and torch.equal(out_mask, mask)


def test_forced_flip_is_involution():
    img, mask = torch.rand(3, 16, 16), disk(16, 5)
    policy = AugmentationPolicy(hflip_p=1.0, vflip_p=0.0, rotation_degrees=0, hue=0, saturation=0, value=0)
    once = augment(img, mask, policy, sample_rng(0, 0, 0))
    twice = augment(*once, policy, sample_rng(0, 0, 1))
    assert not torch.equal(once[0], img)
    assert torch.equal(twice[0], img) and torch.equal(twice[1], mask)


def test_augmentation_keeps_mask_binary_and_area():
    mask = disk()
    img = mask.expand(3, -1, -1).clone()
    area = mask.sum().item()
    for i in range(30):
        _, m = augment(img, mask, AugmentationPolicy(), sample_rng(2333, 0, i))
        assert torch.all((m == 0) | (m == 1))
        assert abs(m.sum().item() - area) <= 0.05 * area


def test_image_and_mask_stay_aligned():
    mask = disk(32, 8)
    mask[:, 4:10, 20:28] = 1
    img = mask.expand(3, -1, -1).clone()
    flips = AugmentationPolicy(rotation_degrees=0, hue=0, saturation=0, value=0)
    for i in range(10):
        a_img, a_mask = augment(img, mask, flips, sample_rng(1, 0, i))
        assert torch.equal(a_img[:1], a_mask)
    full = AugmentationPolicy()
    for i in range(10):
        a_img, a_mask = augment(img, mask, full, sample_rng(1, 0, i))
        disagree = ((a_img.mean(0, keepdim=True) > 0.5).float() != a_mask).float().mean()
        assert disagree < 0.03


def test_augmentation_independent_of_batching(fixture_a):
    ds = load_dataset(fixture_a).train
    policy = AugmentationPolicy()

    def collect(bs):
        out = {}
        for imgs, masks, names in iterate_batches(ds, bs, shuffle=True, seed=5, epoch=2, policy=policy):
            for name, img, m in zip(names, imgs, masks):
                out[name] = (img, m)
        return out

    a, b = collect(1), collect(3)
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k][0], b[k][0]) and torch.equal(a[k][1], b[k][1])


def test_dataset_spec_parse():
    assert DatasetSpec.parse("BUSI:/x").name == "BUSI"
    assert DatasetSpec.parse("/some/dir").name == "folder"
    with pytest.raises(ValueError):
        DatasetSpec("LIDC", "/x")
