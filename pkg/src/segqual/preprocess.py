"""Turn (image, predicted mask, box prompt) into a fixed-size regressor input.

Images are float arrays of shape (H, W) or (H, W, C) with C in {1, 3} and
values in [0, 1]. The final model input is channel-first, (3, side, side).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .metrics import as_mask

DEFAULT_INPUT_SIDE = 244


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box, half-open: columns [x0, x1), rows [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise InvalidInputError(f"box {self.as_list()} outside a {width}x{height} image")

    @classmethod
    def tight(cls, mask) -> "BoxPrompt":
        """Smallest box containing every foreground pixel of ``mask``."""
        m = as_mask(mask)
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        if rows.size == 0:
            raise InvalidInputError("cannot take the bounding box of an empty mask")
        return cls(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"image must be HxW or HxWxC, got shape {np.shape(img)}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise InvalidInputError("image intensities must lie in [0, 1]")
    return arr


def expand_channels(img) -> np.ndarray:
    """Replicate a grayscale image to three channels; pass RGB through."""
    arr = as_image(img)
    c = arr.shape[2]
    if c == 3:
        return arr
    if c == 1:
        return np.repeat(arr, 3, axis=2)
    raise InvalidInputError(f"expected 1 or 3 channels, got {c}")


def blend(img3, mask) -> np.ndarray:
    """Write the mask into the red channel: red = 0.5 * red + 0.5 * mask."""
    arr = as_image(img3)
    if arr.shape[2] != 3:
        raise InvalidInputError(f"blend needs a 3-channel image, got {arr.shape[2]}")
    m = as_mask(mask)
    if m.shape != arr.shape[:2]:
        raise InvalidInputError(f"mask shape {m.shape} does not match image {arr.shape[:2]}")
    out = arr.copy()
    out[:, :, 0] = 0.5 * arr[:, :, 0] + 0.5 * m
    return out


def crop(img, box: BoxPrompt) -> np.ndarray:
    arr = as_image(img)
    box.validate(arr.shape[1], arr.shape[0])
    return arr[box.y0:box.y1, box.x0:box.x1].copy()


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers, edge samples clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(img, side: int) -> np.ndarray:
    """Bilinear resize of an HxWxC image to side x side."""
    if side < 1:
        raise InvalidInputError(f"side must be >= 1, got {side}")
    arr = as_image(img)
    h, w = arr.shape[:2]
    if h == side and w == side:
        return arr.copy()
    r0, r1, fy = _axis_weights(h, side)
    c0, c1, fx = _axis_weights(w, side)
    fy = fy[:, None, None]
    rows = arr[r0] * (1.0 - fy) + arr[r1] * fy
    fx = fx[None, :, None]
    out = rows[:, c0] * (1.0 - fx) + rows[:, c1] * fx
    # convex weights can overshoot by an ulp
    return np.clip(out, 0.0, 1.0)


def psi(img, mask, box: BoxPrompt, side: int = DEFAULT_INPUT_SIDE) -> np.ndarray:
    """Full preprocessing: expand, blend, crop to the box, resize.

    Returns a channel-first (3, side, side) float64 array.
    """
    merged = blend(expand_channels(img), mask)
    return np.ascontiguousarray(resize(crop(merged, box), side).transpose(2, 0, 1))
