"""Region and surface metrics for 2D label maps.

Dice and Jaccard are reported in percent.  Surface distances are Euclidean
in pixel units between 4-connected boundary pixels.  HD95 takes the
nearest-rank 95th percentile of each directed distance list and keeps the
larger one.  ASD averages the two directed lists pooled together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


def dice_jaccard(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[float, float]:
    a = pred == class_id
    b = gt == class_id
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if sa + sb == 0:
        return 100.0, 100.0
    return 100.0 * 2 * inter / (sa + sb), 100.0 * inter / (sa + sb - inter)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it (or off-image)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def surface_pixels(mask: np.ndarray) -> np.ndarray:
    """``(K, 2)`` row/column coordinates of the surface, in raster order."""
    return np.argwhere(surface_mask(mask))


def nearest_rank(values: np.ndarray, q: float = 0.95) -> float:
    v = np.sort(values)
    k = max(int(math.ceil(q * len(v))), 1)
    return float(v[k - 1])


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each surface pixel of ``src`` to the nearest surface pixel of ``dst``."""
    s_src, s_dst = surface_mask(src), surface_mask(dst)
    return distance_transform_edt(~s_dst)[s_src]


def hd95_asd(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """HD95 and ASD; ``(0, 0)`` when both are empty, NaN when exactly one is."""
    pe, ge = not np.any(pred), not np.any(gt)
    if pe and ge:
        return 0.0, 0.0
    if pe or ge:
        return math.nan, math.nan
    d_pg = directed_distances(pred, gt)
    d_gp = directed_distances(gt, pred)
    hd95 = max(nearest_rank(d_pg), nearest_rank(d_gp))
    asd = float(np.concatenate([d_pg, d_gp]).mean())
    return hd95, asd


@dataclass
class ClassMetrics:
    class_id: int
    dice: float
    jaccard: float
    hd95: float
    asd: float

    @property
    def surface_defined(self) -> bool:
        return not math.isnan(self.hd95)


@dataclass
class MetricsReport:
    """Per-class metrics for one sample."""

    sample_id: str
    classes: list[ClassMetrics] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([c.dice for c in self.classes]))


def evaluate_sample(sample_id: str, pred: np.ndarray, gt: np.ndarray, class_count: int) -> MetricsReport:
    """Score foreground classes ``1 .. class_count - 1``."""
    report = MetricsReport(sample_id)
    for c in range(1, class_count):
        d, j = dice_jaccard(pred, gt, c)
        hd, asd = hd95_asd(pred == c, gt == c)
        report.classes.append(ClassMetrics(c, d, j, hd, asd))
    return report


def summarize(reports: list[MetricsReport]) -> dict[str, float]:
    """Means over all (sample, class) pairs; undefined surface metrics are skipped."""
    rows = [c for r in reports for c in r.classes]
    defined = [c for c in rows if c.surface_defined]
    return {
        "dice": float(np.mean([c.dice for c in rows])),
        "jaccard": float(np.mean([c.jaccard for c in rows])),
        "hd95": float(np.mean([c.hd95 for c in defined])) if defined else math.nan,
        "asd": float(np.mean([c.asd for c in defined])) if defined else math.nan,
        "undefined": len(rows) - len(defined),
    }
