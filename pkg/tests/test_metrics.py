import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dice_count, hd95_bruteforce, iou_count, random_mask_pair
from wavegms.metrics import boundary, dice, evaluate_dataset, hd95, iou


def square(size, top, left, side):
    m = np.zeros((size, size), np.uint8)
    m[top:top + side, left:left + side] = 1
    return m


def overlap_fixture():
    # P: rows 0-1, cols 0-3 (8 px); G: rows 1-2, cols 0-3 (8 px); overlap 4
    p = np.zeros((6, 6), np.uint8)
    g = np.zeros((6, 6), np.uint8)
    p[0:2, 0:4] = 1
    g[1:3, 0:4] = 1
    return p, g


def test_dice_examples():
    m = square(8, 2, 2, 3)
    assert dice(m, m) == 1.0
    assert dice(square(8, 0, 0, 2), square(8, 5, 5, 2)) == 0.0
    p, g = overlap_fixture()
    assert dice(p, g) == pytest.approx(0.5)
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_examples():
    m = square(8, 2, 2, 3)
    assert iou(m, m) == 1.0
    p, g = overlap_fixture()
    assert iou(p, g) == pytest.approx(4 / 12)
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_hd95_examples():
    m = square(8, 2, 2, 3)
    assert hd95(m, m) == 0.0
    a = np.zeros((8, 8), np.uint8)
    b = np.zeros((8, 8), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hd95(a, b) == pytest.approx(5.0)


def test_empty_sentinels():
    z = np.zeros((6, 8), np.uint8)
    assert hd95(z, z) == 0.0
    assert hd95(z, square(8, 1, 1, 2)[:6]) == pytest.approx(math.hypot(6, 8))
    assert hd95(square(8, 1, 1, 2)[:6], z) == pytest.approx(math.hypot(6, 8))


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        dice(np.full((4, 4), 0.5), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        hd95(np.zeros((4, 4)), np.zeros((5, 5)))


def test_boundary_rule():
    m = square(6, 0, 0, 4)
    b = boundary(m.astype(bool))
    assert b[0, 0] and b[3, 3] and b[0, 2]
    assert not b[1, 1] and not b[2, 2]


def test_matches_bruteforce_oracle_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(150):
        p, g = random_mask_pair(rng)
        assert abs(dice(p, g) - dice_count(p, g)) <= 1e-9
        assert abs(iou(p, g) - iou_count(p, g)) <= 1e-9
        assert abs(hd95(p, g) - hd95_bruteforce(p, g)) <= 1e-9


masks = st.integers(1, 12).flatmap(
    lambda n: st.tuples(arrays(np.uint8, (n, n), elements=st.integers(0, 1)),
                        arrays(np.uint8, (n, n), elements=st.integers(0, 1))))


@given(masks)
def test_iou_dice_identity_and_symmetry(pair):
    p, g = pair
    d, j = dice(p, g), iou(p, g)
    assert j == pytest.approx(d / (2 - d), abs=1e-9)
    assert j <= d + 1e-12
    assert d == dice(g, p) and j == iou(g, p)
    assert hd95(p, g) == pytest.approx(hd95(g, p), abs=1e-12)
    assert hd95(p, p) == 0.0


@given(masks, st.integers(0, 3), st.integers(0, 3))
def test_translation_invariance(pair, dy, dx):
    p, g = pair
    n = p.shape[0]
    big_p = np.zeros((n + 3, n + 3), np.uint8)
    big_g = np.zeros_like(big_p)
    big_p[dy:dy + n, dx:dx + n] = p
    big_g[dy:dy + n, dx:dx + n] = g
    assert dice(big_p, big_g) == pytest.approx(dice(p, g))
    assert iou(big_p, big_g) == pytest.approx(iou(p, g))


def test_evaluate_dataset_examples():
    m = square(8, 2, 2, 3)
    perfect = evaluate_dataset([m, m], [m, m])
    assert (perfect.dsc, perfect.iou, perfect.hd95) == (100.0, 100.0, 0.0)
    half = evaluate_dataset([m, square(8, 0, 0, 2)], [m, square(8, 5, 5, 2)])
    assert half.dsc == 50.0
    assert half.n_images == 2 and len(half.per_image) == 2
    for row in half.per_image:
        assert row["iou"] <= row["dice"]
    assert half.iou <= half.dsc


def test_evaluate_dataset_errors():
    m = square(8, 2, 2, 3)
    with pytest.raises(ValueError):
        evaluate_dataset([m], [m, m])
    with pytest.raises(ValueError):
        evaluate_dataset([], [])
