"""Rectangular interpolation masks, image/label mixing and the boundary band."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

REFERENCE_EPSILON = 13


class InvalidRatioError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class MixPlan:
    """One sampled box.

    ``region_mask`` is 1 where the unlabeled image shows through and 0 inside
    the box that receives labeled content.  Coordinates are half-open: the box
    covers rows ``[h0, h0 + box_h)`` and columns ``[w0, w0 + box_w)``.
    """

    h0: int
    w0: int
    box_h: int
    box_w: int
    region_mask: np.ndarray
    band_mask: np.ndarray
    epsilon: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.region_mask.shape

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.h0, self.w0, self.h0 + self.box_h, self.w0 + self.box_w


def default_epsilon(H: int, W: int) -> int:
    """Band half-width scaled down from 13 px at 256 px resolution, never below 2."""
    side = min(H, W)
    if side >= 256:
        return REFERENCE_EPSILON
    return max(2, int(math.floor(REFERENCE_EPSILON * side / 256 + 0.5)))


def box_sides(H: int, W: int, alpha: float) -> tuple[int, int]:
    return int(math.floor(alpha * H)), int(math.floor(alpha * W))


def make_region_mask(H: int, W: int, alpha: float, rng: np.random.Generator,
                     epsilon: int | None = None) -> MixPlan:
    """Draw a box of ``floor(alpha*H) x floor(alpha*W)`` with its corner uniform over valid positions."""
    if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
        raise InvalidRatioError(f"alpha must lie in [0, 1], got {alpha}")
    if H < 1 or W < 1:
        raise DimensionError(f"image must be at least 1x1, got {H}x{W}")
    if epsilon is None:
        epsilon = default_epsilon(H, W)
    bh, bw = box_sides(H, W, alpha)
    h0 = int(rng.integers(0, H - bh + 1))
    w0 = int(rng.integers(0, W - bw + 1))
    return plan_from_box(H, W, h0, w0, bh, bw, epsilon)


def plan_from_box(H: int, W: int, h0: int, w0: int, box_h: int, box_w: int,
                  epsilon: int) -> MixPlan:
    if not (0 <= h0 and h0 + box_h <= H and 0 <= w0 and w0 + box_w <= W):
        raise DimensionError(f"box ({h0},{w0})+({box_h},{box_w}) does not fit in {H}x{W}")
    region = np.ones((H, W), dtype=np.uint8)
    region[h0:h0 + box_h, w0:w0 + box_w] = 0
    band = band_mask((h0, w0, h0 + box_h, w0 + box_w), epsilon, H, W)
    return MixPlan(h0, w0, box_h, box_w, region, band, epsilon)


def band_mask(box: tuple[int, int, int, int], epsilon: int, H: int, W: int) -> np.ndarray:
    """Ring of pixels within ``epsilon`` of the box edge, on both sides of it.

    The expanded box is clipped to the image; the shrunken box is empty when
    the box is thinner than ``2*epsilon``.  An empty box yields an empty band.
    """
    if epsilon < 1:
        raise ValueError(f"epsilon must be >= 1, got {epsilon}")
    h0, w0, h1, w1 = box
    band = np.zeros((H, W), dtype=np.uint8)
    if h1 <= h0 or w1 <= w0:
        return band
    band[max(h0 - epsilon, 0):min(h1 + epsilon, H), max(w0 - epsilon, 0):min(w1 + epsilon, W)] = 1
    sh0, sw0, sh1, sw1 = h0 + epsilon, w0 + epsilon, h1 - epsilon, w1 - epsilon
    if sh1 > sh0 and sw1 > sw0:
        band[sh0:sh1, sw0:sw1] = 0
    return band


def make_band_mask(plan: MixPlan, epsilon: int, H: int, W: int) -> np.ndarray:
    return band_mask(plan.box, epsilon, H, W)


def _select(outside: np.ndarray, inside: np.ndarray, plan: MixPlan) -> np.ndarray:
    if outside.shape != inside.shape:
        raise DimensionError(f"shape mismatch: {outside.shape} vs {inside.shape}")
    if outside.shape[-2:] != plan.shape:
        raise DimensionError(f"inputs {outside.shape} do not match mask {plan.shape}")
    return np.where(plan.region_mask.astype(bool), outside, inside)


def mix_images(x_unlabeled: np.ndarray, x_labeled: np.ndarray, plan: MixPlan) -> np.ndarray:
    """Unlabeled pixels outside the box, labeled pixels inside it.

    Accepts ``(H, W)`` or ``(C, H, W)`` arrays; the mask broadcasts over channels.
    """
    return _select(x_unlabeled, x_labeled, plan)


def mix_labels(y_pseudo: np.ndarray, y_labeled: np.ndarray, plan: MixPlan) -> np.ndarray:
    return _select(y_pseudo, y_labeled, plan)
