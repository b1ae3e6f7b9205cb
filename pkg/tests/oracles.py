"""Brute-force reference implementations, deliberately naive and loop-based."""

import itertools
import math

import numpy as np


def dice_bf(a, b):
    inter = size_a = size_b = 0
    for r in range(len(a)):
        for c in range(len(a[0])):
            size_a += int(a[r][c])
            size_b += int(b[r][c])
            inter += int(a[r][c]) and int(b[r][c])
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def hausdorff_bf(a, b):
    pa = [(r, c) for r in range(len(a)) for c in range(len(a[0])) if a[r][c]]
    pb = [(r, c) for r in range(len(b)) for c in range(len(b[0])) if b[r][c]]

    def directed(p, q):
        return max(min(math.hypot(x[0] - y[0], x[1] - y[1]) for y in q) for x in p)

    return max(directed(pa, pb), directed(pb, pa))


def all_masks(h, w):
    for bits in itertools.product((0, 1), repeat=h * w):
        yield np.array(bits, dtype=np.uint8).reshape(h, w)


def bilinear_bf(img, side):
    """Per-pixel bilinear resize, half-pixel centers, clamped edges."""
    h, w, ch = img.shape
    out = np.zeros((side, side, ch))
    for i in range(side):
        sy = min(max((i + 0.5) * h / side - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy)); y1 = min(y0 + 1, h - 1); fy = sy - y0
        for j in range(side):
            sx = min(max((j + 0.5) * w / side - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx)); x1 = min(x0 + 1, w - 1); fx = sx - x0
            for k in range(ch):
                top = img[y0, x0, k] * (1 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1 - fx) + img[y1, x1, k] * fx
                out[i, j, k] = top * (1 - fy) + bot * fy
    return out


def flood_connected(mask):
    """True if the foreground is one 4-connected component."""
    pts = set(zip(*np.nonzero(mask)))
    if not pts:
        return False
    stack = [next(iter(pts))]
    seen = set(stack)
    while stack:
        r, c = stack.pop()
        for n in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if n in pts and n not in seen:
                seen.add(n)
                stack.append(n)
    return len(seen) == len(pts)


def exhaustive_tables(h, w):
    """All nonempty h x w masks with brute-force dice and Hausdorff tables.

    The Hausdorff table is built from the explicit pixel-center distance
    matrix, enumerating every (point, point) pair for every mask pair.
    """
    masks = [m for m in all_masks(h, w) if m.any()]
    flat = np.array([m.ravel() for m in masks], dtype=bool)
    coords = [(r, c) for r in range(h) for c in range(w)]
    dist = np.array([[math.hypot(p[0] - q[0], p[1] - q[1]) for q in coords] for p in coords])
    counts = flat.sum(axis=1)
    inter = flat.astype(np.int64) @ flat.T.astype(np.int64)
    dice_t = 2.0 * inter / (counts[:, None] + counts[None, :])
    # nearest[b, p]: distance from pixel p to the closest foreground pixel of mask b
    nearest = np.where(flat[:, None, :], dist[None, :, :], np.inf).min(axis=2)
    # directed[a, b] = max over pixels p in a of nearest[b, p]
    directed = np.where(flat[:, None, :], nearest[None, :, :], -np.inf).max(axis=2)
    hd_t = np.maximum(directed, directed.T)
    return masks, dice_t, hd_t
