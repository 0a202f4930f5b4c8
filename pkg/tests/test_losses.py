import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p3seg import losses
from p3seg.losses import (cross_entropy, difficulty_map, dice_loss, seg_loss, softmax_probs,
                          stage1_loss, stage2_loss, weighted_ce, weighted_dice)

from oracles import (central_difference, difficulty_loop, rel_error, seg_loop, stage2_loop)


def instance(seed, n=3, H=8, W=8):
    g = np.random.default_rng(seed)
    logits = g.normal(0, 1.5, (n, H, W))
    labels = g.integers(0, n, (H, W))
    band = g.integers(0, 2, (H, W)).astype(np.uint8)
    mu = g.random((H, W)) * band
    return logits, labels, band, mu


def test_softmax_basic():
    p = softmax_probs(np.zeros((4, 2, 2)))
    assert np.allclose(p, 0.25)
    p = softmax_probs(np.array([0.0, math.log(3)]).reshape(2, 1, 1))
    assert p[:, 0, 0] == pytest.approx([0.25, 0.75], abs=1e-15)
    z = np.random.default_rng(0).normal(size=(3, 4, 4))
    assert np.allclose(softmax_probs(z + 7.5), softmax_probs(z), atol=1e-15)
    assert np.allclose(softmax_probs(z).sum(axis=0), 1.0, atol=1e-12)
    assert np.isfinite(softmax_probs(np.full((2, 1, 1), 1e4))).all()


def test_softmax_rejects_nan():
    z = np.zeros((2, 2, 2))
    z[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        softmax_probs(z)


def test_cross_entropy_values():
    y = np.array([[0, 1], [1, 0]])
    assert cross_entropy(losses.one_hot(y, 2), y).value == pytest.approx(0.0, abs=1e-15)
    assert cross_entropy(np.full((2, 2, 2), 0.5), y).value == pytest.approx(math.log(2), abs=1e-15)


def test_dice_values():
    y = np.array([[0, 1], [1, 0]])
    assert dice_loss(losses.one_hot(y, 2), y).value == pytest.approx(0.0, abs=1e-9)
    # p = 0.5 everywhere, 2 pixels per class: per class (2*1 + s)/(2 + 2 + s)
    s = 1e-5
    expected = 1 - (2 * 1.0 + s) / (4.0 + s)
    assert dice_loss(np.full((2, 2, 2), 0.5), y).value == pytest.approx(expected, abs=1e-15)


def test_weighted_ce_closed_form():
    # single pixel, p(true) = e^-1, mu = 1 -> (1 + 1) * 1
    p = np.array([math.exp(-1), 1 - math.exp(-1)]).reshape(2, 1, 1)
    y = np.zeros((1, 1), dtype=int)
    assert weighted_ce(p, y, np.ones((1, 1))).value == pytest.approx(2.0, abs=1e-14)


def test_weighted_reduce_to_plain_when_mu_zero():
    logits, y, _, _ = instance(1)
    p = softmax_probs(logits)
    zero = np.zeros(y.shape)
    for weighted, plain in ((weighted_ce, cross_entropy), (weighted_dice, dice_loss)):
        a, b = weighted(p, y, zero), plain(p, y)
        assert a.value == b.value
        assert np.array_equal(a.grad, b.grad)
    assert weighted_dice(losses.one_hot(y, 3), y, zero).value == pytest.approx(0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_weighted_at_least_plain(seed):
    logits, y, band, mu = instance(seed)
    p = softmax_probs(logits)
    assert weighted_ce(p, y, mu).value >= cross_entropy(p, y).value
    # the weight sits on the overlap term, so weighted Dice can only be lower
    assert weighted_dice(p, y, mu).value <= dice_loss(p, y).value


def test_weighted_dice_can_go_negative():
    y = np.array([[0, 1], [1, 0]])
    p = losses.one_hot(y, 2)
    assert weighted_dice(p, y, np.ones((2, 2))).value < 0


LOSSES = {
    "ce": lambda z, y, band, mu: cross_entropy(softmax_probs(z), y),
    "dice": lambda z, y, band, mu: dice_loss(softmax_probs(z), y),
    "wce": lambda z, y, band, mu: weighted_ce(softmax_probs(z), y, mu),
    "wdice": lambda z, y, band, mu: weighted_dice(softmax_probs(z), y, mu),
    "wce_region": lambda z, y, band, mu: weighted_ce(softmax_probs(z), y, mu, band),
    "stage2": lambda z, y, band, mu: stage2_loss(z, y, band, mu),
    "stage2_image": lambda z, y, band, mu: stage2_loss(z, y, band, mu, ce_norm="image"),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(name, seed):
    z, y, band, mu = instance(seed)
    fn = LOSSES[name]
    analytic = fn(z, y, band, mu).grad
    numeric = central_difference(lambda x: fn(x, y, band, mu).value, z.copy())
    assert rel_error(analytic, numeric) <= 1e-4


def test_stage1_gradient_matches_finite_differences():
    zs, ys, _, _ = instance(10)
    zu, yu, _, _ = instance(11)
    _, gs, gu = stage1_loss(zs, ys, zu, yu, 0.37)
    ns = central_difference(lambda x: stage1_loss(x, ys, zu, yu, 0.37)[0], zs.copy())
    nu = central_difference(lambda x: stage1_loss(zs, ys, x, yu, 0.37)[0], zu.copy())
    assert rel_error(gs, ns) <= 1e-4
    assert rel_error(gu, nu) <= 1e-4


def test_difficulty_map_cases():
    H = W = 9
    y = np.zeros((H, W), dtype=int)
    band = np.ones((H, W))
    assert not difficulty_map(y, y, band).any()

    pred = y.copy()
    # centre (4, 4): disagree on 5 of its 25 neighbours
    for i, j in [(2, 2), (2, 3), (3, 2), (6, 6), (5, 6)]:
        pred[i, j] = 1
    assert difficulty_map(pred, y, band)[4, 4] == pytest.approx(0.2, abs=1e-15)

    pred = y.copy()
    # corner (0, 0): clipped window is 3x3, disagree on 3 of 9
    for i, j in [(0, 1), (1, 1), (2, 2)]:
        pred[i, j] = 2
    assert difficulty_map(pred, y, band)[0, 0] == pytest.approx(1 / 3, abs=1e-15)


def test_difficulty_zero_off_band():
    g = np.random.default_rng(4)
    pred, y = g.integers(0, 3, (10, 10)), g.integers(0, 3, (10, 10))
    band = np.zeros((10, 10))
    band[3:6, 2:8] = 1
    mu = difficulty_map(pred, y, band)
    assert not mu[band == 0].any()
    assert ((0 <= mu) & (mu <= 1)).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_difficulty_matches_loop_and_permutation_invariant(seed):
    g = np.random.default_rng(seed)
    H, W = g.integers(1, 12, size=2)
    pred, y = g.integers(0, 4, (H, W)), g.integers(0, 4, (H, W))
    band = g.integers(0, 2, (H, W))
    mu = difficulty_map(pred, y, band)
    assert np.array_equal(mu, difficulty_loop(pred, y, band))
    perm = g.permutation(4)
    assert np.array_equal(difficulty_map(perm[pred], perm[y], band), mu)


def test_stage2_reductions():
    z, y, _, _ = instance(3)
    zero_band = np.zeros(y.shape)
    ref = seg_loss(z, y)
    assert stage2_loss(z, y, zero_band).value == pytest.approx(ref.value, abs=1e-12)
    ones = np.ones(y.shape)
    assert stage2_loss(z, y, ones, np.zeros(y.shape)).value == pytest.approx(ref.value, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_stage2_matches_scalar_oracle(seed):
    z, y, band, mu = instance(seed)
    assert stage2_loss(z, y, band, mu).value == pytest.approx(stage2_loop(z, y, band, mu), abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_stage2_image_norm_matches_scalar_oracle(seed):
    z, y, band, mu = instance(seed)
    got = stage2_loss(z, y, band, mu, ce_norm="image").value
    assert got == pytest.approx(stage2_loop(z, y, band, mu, per_image=True), abs=1e-9)


def test_stage2_image_norm_reweights_plain_ce():
    z, y, band, _ = instance(9)
    zero = np.zeros(y.shape)
    p = softmax_probs(z)
    dice_parts = weighted_dice(p, y, zero, band).value + dice_loss(p, y, 1 - band).value
    # with mu = 0 the two CE terms add up to the ordinary image-wide CE
    got = stage2_loss(z, y, band, zero, ce_norm="image").value
    assert got == pytest.approx(cross_entropy(p, y).value + dice_parts, abs=1e-12)
    mu = np.full(y.shape, 0.5) * band
    assert stage2_loss(z, y, band, mu, ce_norm="image").value > got
    with pytest.raises(ValueError):
        stage2_loss(z, y, band, ce_norm="pixel")


def test_stage2_default_mu_uses_argmax():
    z, y, band, _ = instance(6)
    mu = difficulty_map(z.argmax(axis=0), y, band)
    assert stage2_loss(z, y, band).value == stage2_loss(z, y, band, mu).value


def test_stage2_continuous():
    z, y, band, mu = instance(7)
    d = np.random.default_rng(8).normal(size=z.shape)
    base = stage2_loss(z, y, band, mu).value
    diffs = [abs(stage2_loss(z + h * d, y, band, mu).value - base) for h in (1e-3, 1e-4, 1e-5)]
    assert diffs[1] < diffs[0] / 5 and diffs[2] < diffs[1] / 5


def test_stage1_values():
    zs, ys, _, _ = instance(20)
    zu, yu, _, _ = instance(21)
    v0, _, gu0 = stage1_loss(zs, ys, zu, yu, 0.0)
    assert v0 == pytest.approx(seg_loss(zs, ys).value, abs=1e-15)
    assert not gu0.any()
    v, _, _ = stage1_loss(zs, ys, zu, yu, 0.25)
    assert v == pytest.approx(seg_loop(zs, ys) + 0.25 * seg_loop(zu, yu), abs=1e-9)
    perfect_s = 30.0 * losses.one_hot(ys, 3)
    perfect_u = 30.0 * losses.one_hot(yu, 3)
    assert stage1_loss(perfect_s, ys, perfect_u, yu, 1.0)[0] == pytest.approx(0, abs=1e-9)
    with pytest.raises(ValueError):
        stage1_loss(zs, ys, zu, yu, -1.0)
