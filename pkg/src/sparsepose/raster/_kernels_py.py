"""NumPy owner-map painting kernels (fallback backend).

Pixel (row r, col c) samples the continuous point (x=c, y=r). Coverage is a
hard test at these lattice points, no anti-aliasing. The compiled backend in
_kernels.pyx implements the same element-wise IEEE arithmetic (it is built
with FMA contraction disabled), so both backends produce bit-identical owner
maps.
"""
import math

import numpy as np


def paint_disk(owner, cx, cy, radius, code):
    """Set owner[r, c] = code where (c - cx)^2 + (r - cy)^2 <= radius^2."""
    h, w = owner.shape
    r0 = max(0, int(math.floor(cy - radius)))
    r1 = min(h - 1, int(math.ceil(cy + radius)))
    c0 = max(0, int(math.floor(cx - radius)))
    c1 = min(w - 1, int(math.ceil(cx + radius)))
    if r0 > r1 or c0 > c1:
        return
    dy = np.arange(r0, r1 + 1, dtype=np.float64) - cy
    dx = np.arange(c0, c1 + 1, dtype=np.float64) - cx
    d2 = (dy * dy)[:, None] + (dx * dx)[None, :]
    block = owner[r0 : r1 + 1, c0 : c1 + 1]
    block[d2 <= radius * radius] = code


def paint_segment(owner, ax, ay, bx, by, half_width, code):
    """Set owner[r, c] = code where the lattice point is within half_width
    of the segment (ax, ay)-(bx, by)."""
    ux = bx - ax
    uy = by - ay
    l2 = ux * ux + uy * uy
    if l2 == 0.0:
        paint_disk(owner, ax, ay, half_width, code)
        return
    h, w = owner.shape
    r0 = max(0, int(math.floor(min(ay, by) - half_width)))
    r1 = min(h - 1, int(math.ceil(max(ay, by) + half_width)))
    c0 = max(0, int(math.floor(min(ax, bx) - half_width)))
    c1 = min(w - 1, int(math.ceil(max(ax, bx) + half_width)))
    if r0 > r1 or c0 > c1:
        return
    py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    t = ((px - ax) * ux + (py - ay) * uy) / l2
    t = np.clip(t, 0.0, 1.0)
    dxq = px - (ax + t * ux)
    dyq = py - (ay + t * uy)
    d2 = dxq * dxq + dyq * dyq
    block = owner[r0 : r1 + 1, c0 : c1 + 1]
    block[d2 <= half_width * half_width] = code
