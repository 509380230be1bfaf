"""Dice overlap and 95th-percentile Hausdorff distance for label masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch


@dataclass(frozen=True)
class MetricResult:
    dice: float
    hd95: float


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")


def dice(pred, gt, c: int = 1) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check(pred, gt)
    p, g = pred == c, gt == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary(region: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour that is background or off-image."""
    padded = np.pad(region, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return region & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact Euclidean distance from each src pixel to the nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    k = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[k - 1])


def hd95(pred, gt, c: int = 1) -> float:
    """95th percentile (nearest rank) of the pooled boundary-to-boundary distances.

    Both masks empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check(pred, gt)
    p, g = pred == c, gt == c
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return float(math.hypot(*pred.shape))
    bp, bg = boundary(p), boundary(g)
    d = np.concatenate([_directed(bp, bg), _directed(bg, bp)])
    return nearest_rank(d, 95.0)


def evaluate(pred, gt, num_classes: int = 2) -> MetricResult:
    """Average Dice/HD95 over the foreground classes ``1..N-1``."""
    classes = range(1, num_classes)
    return MetricResult(
        float(np.mean([dice(pred, gt, c) for c in classes])),
        float(np.mean([hd95(pred, gt, c) for c in classes])),
    )
