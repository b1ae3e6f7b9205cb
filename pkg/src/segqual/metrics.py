"""Quality metrics for binary masks and correlation statistics.

Masks are 2-D arrays (height x width) holding only 0 and 1. Any integer,
float or bool dtype is accepted as long as the values are binary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, UndefinedMetricError

# above this many point pairs the distance-transform route is cheaper
_PAIRWISE_LIMIT = 1 << 16


@dataclass(frozen=True)
class ScorePair:
    predicted: float
    true_value: float
    sample_id: str
    model_id: str

    def __post_init__(self):
        for name in ("predicted", "true_value"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name}={v} outside [0, 1]")


def as_mask(a, name: str = "mask") -> np.ndarray:
    """Validate a binary mask and return it as a bool array."""
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError(f"{name} contains values other than 0 and 1")
    return arr.astype(bool)


def _pair(a, b):
    a = as_mask(a, "a")
    b = as_mask(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """Dice similarity coefficient 2|a∩b| / (|a|+|b|).

    Two empty masks score 1.0.
    """
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _directed_sq(a: np.ndarray, b: np.ndarray) -> int:
    # squared distance from the farthest pixel of a to its nearest pixel of b
    _, (iy, ix) = ndimage.distance_transform_edt(~b, return_indices=True)
    ys, xs = np.nonzero(a)
    dy = iy[ys, xs].astype(np.int64) - ys
    dx = ix[ys, xs].astype(np.int64) - xs
    return int((dy * dy + dx * dx).max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance, in pixels, between foreground pixel centers.

    Raises:
        UndefinedMetricError: if either mask has no foreground.
    """
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("hausdorff distance is undefined for an empty mask")
    pa = np.argwhere(a)
    pb = np.argwhere(b)
    if len(pa) * len(pb) <= _PAIRWISE_LIMIT:
        diff = pa[:, None, :] - pb[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        return math.sqrt(max(int(d2.min(axis=1).max()), int(d2.min(axis=0).max())))
    return math.sqrt(max(_directed_sq(a, b), _directed_sq(b, a)))


def normalized_hd(hd: float, crop_diagonal: float) -> float:
    if crop_diagonal <= 0:
        raise InvalidInputError(f"crop diagonal must be positive, got {crop_diagonal}")
    if hd < 0:
        raise InvalidInputError(f"hausdorff distance must be nonnegative, got {hd}")
    return min(hd / crop_diagonal, 1.0)


def _sequences(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InvalidInputError(f"sequences must be 1-D with equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InvalidInputError("correlation needs at least two observations")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _sequences(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation is undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    start = 0
    while start < v.size:
        stop = start + 1
        while stop < v.size and sorted_v[stop] == sorted_v[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _sequences(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))
