"""Segmentation losses with analytic gradients with respect to logits.

All functions work on a single sample: logits/probabilities are ``(n, H, W)``
and label maps ``(H, W)``.  Each loss first computes its gradient with
respect to the probabilities and then chains it through the softmax.

Pixel weights ``mu`` and region masks are constants: no gradient flows into
them.  An optional ``region`` mask restricts a loss to a subset of pixels.
Cross-entropy is then normalised by the region size and all Dice sums run
over the region only.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5
NEIGHBORHOOD = 5


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Channel softmax over axis 0, stabilised by max subtraction."""
    if np.isnan(logits).any():
        raise FloatingPointError("NaN in logits")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp`` through the softmax Jacobian to get ``dL/dz``."""
    inner = (probs * grad_probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - inner)


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    return (labels[None, :, :] == np.arange(n)[:, None, None]).astype(np.float64)


def _region(region, shape) -> np.ndarray:
    if region is None:
        return np.ones(shape, dtype=np.float64)
    return np.asarray(region, dtype=np.float64)


def _weights(mu, shape) -> np.ndarray:
    if mu is None:
        return np.ones(shape, dtype=np.float64)
    return 1.0 + np.asarray(mu, dtype=np.float64)


def _wce_probs(probs, labels, mu=None, region=None, per_image=False):
    """Weighted NLL and its gradient w.r.t. probabilities.

    The sum over ``region`` is divided by the region's pixel count, or by the
    whole image's pixel count when ``per_image`` is set.
    """
    n = probs.shape[0]
    r = _region(region, labels.shape)
    if r.sum() == 0:
        return 0.0, np.zeros_like(probs)
    count = float(r.size) if per_image else r.sum()
    w = _weights(mu, labels.shape) * r
    y = one_hot(labels, n)
    p_true = (probs * y).sum(axis=0)
    floored = np.maximum(p_true, PROB_FLOOR)
    value = -(w * np.log(floored)).sum() / count
    # d/dp log(max(p, floor)) vanishes below the floor
    dp_true = np.where(p_true > PROB_FLOOR, -w / (floored * count), 0.0)
    return float(value), y * dp_true[None]


def _wdice_probs(probs, labels, mu=None, region=None):
    """Weighted soft Dice: the weight enters the numerator only."""
    n = probs.shape[0]
    r = _region(region, labels.shape)[None]
    w = _weights(mu, labels.shape)[None]
    y = one_hot(labels, n)
    num = 2.0 * (w * probs * y * r).sum(axis=(1, 2)) + DICE_SMOOTH
    den = ((probs + y) * r).sum(axis=(1, 2)) + DICE_SMOOTH
    value = 1.0 - (num / den).mean()
    dnum = 2.0 * w * y * r
    dratio = (dnum * den[:, None, None] - num[:, None, None] * r) / (den ** 2)[:, None, None]
    return float(value), -dratio / n


def _as_loss(probs, part):
    value, gp = part
    return LossValue(value, softmax_backward(probs, gp))


def cross_entropy(probs: np.ndarray, labels: np.ndarray, region=None) -> LossValue:
    return _as_loss(probs, _wce_probs(probs, labels, None, region))


def dice_loss(probs: np.ndarray, labels: np.ndarray, region=None) -> LossValue:
    return _as_loss(probs, _wdice_probs(probs, labels, None, region))


def weighted_ce(probs: np.ndarray, labels: np.ndarray, mu: np.ndarray, region=None) -> LossValue:
    """Cross-entropy with per-pixel weight ``1 + mu``."""
    return _as_loss(probs, _wce_probs(probs, labels, mu, region))


def weighted_dice(probs: np.ndarray, labels: np.ndarray, mu: np.ndarray, region=None) -> LossValue:
    """Soft Dice with ``1 + mu`` on the intersection term only.

    The denominator stays unweighted, so a large ``mu`` can push the loss
    below zero.  No clamping is applied.
    """
    return _as_loss(probs, _wdice_probs(probs, labels, mu, region))


def _box_count(a: np.ndarray, k: int = NEIGHBORHOOD) -> np.ndarray:
    """Sum of ``a`` over the k x k window centred on each pixel, zero outside the image."""
    r = k // 2
    H, W = a.shape
    padded = np.zeros((H + 2 * r, W + 2 * r), dtype=np.int64)
    padded[r:r + H, r:r + W] = a
    c = np.zeros((H + 2 * r + 1, W + 2 * r + 1), dtype=np.int64)
    c[1:, 1:] = padded.cumsum(0).cumsum(1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def difficulty_map(pred: np.ndarray, labels: np.ndarray, band: np.ndarray) -> np.ndarray:
    """Fraction of disagreeing pixels in the clipped 5x5 neighbourhood, on band pixels only."""
    if pred.shape != labels.shape or pred.shape != band.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {labels.shape}, {band.shape}")
    agree = _box_count((pred == labels).astype(np.int64))
    total = _box_count(np.ones(pred.shape, dtype=np.int64))
    mu = 1.0 - agree / total
    return np.where(np.asarray(band).astype(bool), mu, 0.0)


def seg_loss(logits: np.ndarray, labels: np.ndarray, region=None) -> LossValue:
    """CE + Dice on the logits."""
    p = softmax_probs(logits)
    ce = _wce_probs(p, labels, None, region)
    dc = _wdice_probs(p, labels, None, region)
    return LossValue(ce[0] + dc[0], softmax_backward(p, ce[1] + dc[1]))


CE_NORMS = ("region", "image")


def stage2_loss(logits: np.ndarray, y_mix: np.ndarray, band: np.ndarray,
                mu: np.ndarray | None = None, ce_norm: str = "region") -> LossValue:
    """Boundary-focused loss on the band plus plain CE + Dice elsewhere.

    ``mu`` defaults to the difficulty map of the argmax prediction against
    ``y_mix``.  With ``ce_norm="region"`` each cross-entropy term is averaged
    over its own region; ``"image"`` divides both by the image's pixel count,
    so the band CE is a reweighting of ordinary CE rather than a separate mean.
    """
    if ce_norm not in CE_NORMS:
        raise ValueError(f"ce_norm must be one of {CE_NORMS}, got {ce_norm!r}")
    per_image = ce_norm == "image"
    p = softmax_probs(logits)
    band = np.asarray(band).astype(np.float64)
    if mu is None:
        mu = difficulty_map(logits.argmax(axis=0), y_mix, band)
    rest = 1.0 - band
    parts = (_wce_probs(p, y_mix, mu, band, per_image), _wdice_probs(p, y_mix, mu, band),
             _wce_probs(p, y_mix, None, rest, per_image), _wdice_probs(p, y_mix, None, rest))
    value = sum(v for v, _ in parts)
    gp = sum(g for _, g in parts)
    return LossValue(value, softmax_backward(p, gp))


def stage1_loss(logits_sup: np.ndarray, y_sup: np.ndarray, logits_unsup: np.ndarray,
                y_pseudo: np.ndarray, lam: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Supervised CE + Dice plus ``lam`` times the same on pseudo-labels.

    Returns the value and the gradients for both logit tensors.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    sup = seg_loss(logits_sup, y_sup)
    unsup = seg_loss(logits_unsup, y_pseudo)
    return sup.value + lam * unsup.value, sup.grad, lam * unsup.grad
