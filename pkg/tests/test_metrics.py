import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p3seg.metrics import (dice_jaccard, evaluate_sample, hd95_asd, nearest_rank, summarize,
                           surface_pixels)

from oracles import hd95_asd_allpairs, surface_loop


def random_mask(g, H, W):
    kind = g.integers(0, 3)
    if kind == 0:
        return g.random((H, W)) < g.uniform(0.05, 0.6)
    m = np.zeros((H, W), dtype=bool)
    for _ in range(g.integers(1, 4)):
        h0, w0 = g.integers(0, H), g.integers(0, W)
        m[h0:h0 + g.integers(1, H + 1), w0:w0 + g.integers(1, W + 1)] = True
    if kind == 2:
        m &= g.random((H, W)) < 0.9
    return m


def test_dice_jaccard_examples():
    a = np.zeros((4, 4), dtype=int)
    assert dice_jaccard(a, a, 1) == (100.0, 100.0)
    a[0, :4] = 1
    assert dice_jaccard(a, a, 1) == (100.0, 100.0)
    b = np.zeros((4, 4), dtype=int)
    b[0, 2:4] = 1
    b[1, 0:2] = 1
    d, j = dice_jaccard(a, b, 1)
    assert d == 50.0
    assert j == pytest.approx(100 / 3, abs=1e-12)
    c = np.zeros((4, 4), dtype=int)
    c[3, :] = 1
    assert dice_jaccard(a, c, 1) == (0.0, 0.0)


def test_dice_jaccard_counting_oracle():
    g = np.random.default_rng(0)
    for _ in range(200):
        H, W = g.integers(1, 20, 2)
        p, t = g.integers(0, 3, (H, W)), g.integers(0, 3, (H, W))
        for c in range(3):
            inter = union = sa = sb = 0
            for i in range(H):
                for j in range(W):
                    x, y = p[i, j] == c, t[i, j] == c
                    inter += x and y
                    union += x or y
                    sa += x
                    sb += y
            d, jac = dice_jaccard(p, t, c)
            if sa + sb == 0:
                assert (d, jac) == (100.0, 100.0)
            else:
                assert d == 100.0 * 2 * inter / (sa + sb)
                assert jac == 100.0 * inter / union
            assert 0 <= jac <= d <= 100


def test_surface_examples():
    one = np.zeros((5, 5), dtype=bool)
    one[2, 2] = True
    assert surface_pixels(one).tolist() == [[2, 2]]
    sq = np.zeros((5, 5), dtype=bool)
    sq[1:4, 1:4] = True
    assert len(surface_pixels(sq)) == 8
    assert [2, 2] not in surface_pixels(sq).tolist()
    assert len(surface_pixels(np.zeros((3, 3), dtype=bool))) == 0
    # image border counts as outside
    assert len(surface_pixels(np.ones((3, 3), dtype=bool))) == 8


def test_surface_matches_loop():
    g = np.random.default_rng(1)
    for _ in range(100):
        m = random_mask(g, *g.integers(1, 16, 2))
        assert [tuple(p) for p in surface_pixels(m)] == surface_loop(m)


def test_hand_case_pixels():
    a = np.zeros((6, 6), dtype=bool)
    b = np.zeros((6, 6), dtype=bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hd95_asd(a, b) == (5.0, 5.0)


def test_identical_and_empty():
    m = np.zeros((8, 8), dtype=bool)
    m[2:6, 1:5] = True
    assert hd95_asd(m, m) == (0.0, 0.0)
    e = np.zeros_like(m)
    assert hd95_asd(e, e) == (0.0, 0.0)
    assert all(math.isnan(v) for v in hd95_asd(m, e))
    assert all(math.isnan(v) for v in hd95_asd(e, m))


def test_nearest_rank():
    assert nearest_rank(np.arange(1.0, 21.0)) == 19.0
    assert nearest_rank(np.array([3.0])) == 3.0
    assert nearest_rank(np.arange(100.0)) == 94.0


def test_oracle_500_instances():
    g = np.random.default_rng(2024)
    for _ in range(500):
        H, W = g.integers(1, 33, 2)
        a, b = random_mask(g, H, W), random_mask(g, H, W)
        got, ref = hd95_asd(a, b), hd95_asd_allpairs(a, b)
        if math.isnan(ref[0]):
            assert all(math.isnan(v) for v in got)
        else:
            assert got[0] == pytest.approx(ref[0], abs=1e-9)
            assert got[1] == pytest.approx(ref[1], abs=1e-9)
            assert got[0] >= 0 and got[1] >= 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry_and_translation(seed):
    g = np.random.default_rng(seed)
    H, W = g.integers(2, 20, 2)
    a, b = random_mask(g, H, W), random_mask(g, H, W)
    ab, ba = hd95_asd(a, b), hd95_asd(b, a)
    assert np.allclose(ab, ba, equal_nan=True, rtol=0, atol=1e-12)
    # embed both in a larger canvas at two different offsets
    ya, xa, yb, xb = g.integers(0, 6, 4)
    big = np.zeros((2, H + 6, W + 6), dtype=bool)
    big2 = big.copy()
    big[0, ya:ya + H, xa:xa + W], big[1, ya:ya + H, xa:xa + W] = a, b
    big2[0, yb:yb + H, xb:xb + W], big2[1, yb:yb + H, xb:xb + W] = a, b
    # image-border pixels count as surface, so compare two interior placements only
    if min(ya, xa, yb, xb) > 0 and max(ya, yb) < 6 and max(xa, xb) < 6:
        assert np.allclose(hd95_asd(*big), hd95_asd(*big2), equal_nan=True, rtol=0, atol=1e-12)
        pa, pb = big[0].astype(int), big[1].astype(int)
        qa, qb = big2[0].astype(int), big2[1].astype(int)
        assert dice_jaccard(pa, pb, 1) == dice_jaccard(qa, qb, 1)


def test_dilation_toward_gt_never_lowers_dice():
    gt = np.zeros((20, 20), dtype=int)
    gt[4:16, 4:16] = 1
    pred = np.zeros_like(gt)
    pred[8:12, 8:12] = 1
    last = dice_jaccard(pred, gt, 1)[0]
    for r in range(1, 5):
        pred[8 - r:12 + r, 8 - r:12 + r] = 1
        d = dice_jaccard(pred, gt, 1)[0]
        assert d >= last
        last = d
    assert last == 100.0


def test_evaluate_and_summarize():
    gt = np.zeros((10, 10), dtype=int)
    gt[2:5, 2:5] = 1
    gt[6:9, 6:9] = 2
    perfect = evaluate_sample("a", gt, gt, 4)
    assert [c.class_id for c in perfect.classes] == [1, 2, 3]
    assert perfect.mean_dice == 100.0
    assert all(c.hd95 == 0 for c in perfect.classes)
    pred = gt.copy()
    pred[pred == 2] = 0
    r = evaluate_sample("b", pred, gt, 4)
    assert r.classes[1].dice == 0.0 and not r.classes[1].surface_defined
    s = summarize([perfect, r])
    assert s["undefined"] == 1
    assert s["dice"] == pytest.approx((100 * 5 + 0) / 6)
    assert s["hd95"] == 0.0
