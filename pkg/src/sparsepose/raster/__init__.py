"""Owner-map rasterization with a compiled fast path and a NumPy fallback.

The backend is picked once at import: the compiled extension if it built,
otherwise the NumPy implementation. Set SPARSEPOSE_PURE_PY=1 to force the
fallback. Both backends paint identical owner maps bit for bit.

An owner map is an int32 H x W array recording which primitive owns each
pixel: keypoint i paints code i, edge j paints code N + j, untouched pixels
stay BACKGROUND (-1). Paint order encodes the overwrite rules, so the owner
map alone determines the rendered image.
"""
import math
import os

import numpy as np

if os.environ.get("SPARSEPOSE_PURE_PY"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

paint_disk = _impl.paint_disk
paint_segment = _impl.paint_segment

BACKGROUND = -1


def scale_point(x, y, in_size, out_size):
    """Map image coordinates to raster coordinates (per-axis scaling)."""
    in_h, in_w = in_size
    out_h, out_w = out_size
    return x * (out_w / in_w), y * (out_h / in_h)


def owner_map(pose_set, out_size, point_radius, line_width,
              per_instance=False):
    """Rasterize a PoseSet into an owner-code map.

    Per instance: edges between two valid endpoints first (code N + j),
    then valid keypoint disks (code i), so disks overwrite edges within an
    instance and later instances overwrite earlier ones entirely. With
    per_instance=True, instance k's codes are offset by k * (N + E) so the
    owning instance stays recoverable.
    """
    out_h, out_w = out_size
    n = pose_set.spec.n
    stride = n + len(pose_set.spec.edges)
    owner = np.full((out_h, out_w), BACKGROUND, dtype=np.int32)
    half_width = line_width / 2.0
    for k, inst in enumerate(pose_set.instances):
        base = k * stride if per_instance else 0
        kps = inst.keypoints
        pts = {}
        for i in inst.valid_indices():
            x, y, _ = kps[i]
            pts[i] = scale_point(x, y, pose_set.image_size, out_size)
        for j, (a, b) in enumerate(pose_set.spec.edges):
            if a in pts and b in pts:
                (ax, ay), (bx, by) = pts[a], pts[b]
                paint_segment(owner, ax, ay, bx, by, half_width, base + n + j)
        for i, (px, py) in pts.items():
            paint_disk(owner, px, py, float(point_radius), base + i)
    return owner


def gaussian_grid(out_size, cx, cy, sigma):
    """exp(-d^2 / (2 sigma^2)) over the full grid, float64, centered at
    integer lattice point (cx, cy)."""
    out_h, out_w = out_size
    dy = np.arange(out_h, dtype=np.float64) - cy
    dx = np.arange(out_w, dtype=np.float64) - cx
    d2 = (dy * dy)[:, None] + (dx * dx)[None, :]
    return np.exp(-d2 / (2.0 * sigma * sigma))


def round_half_up(v):
    return int(math.floor(v + 0.5))


def heatmap_arrays(pose_set, out_size, sigma):
    """Per-keypoint Gaussian maps, max-combined over instances.

    Returns (maps, valid_indices): one float64 H' x W' array per keypoint
    index that is valid in at least one instance, in spec order. Centers are
    integer-rounded after scaling so in-bounds peaks equal exactly 1.0.
    """
    valid = pose_set.valid_union()
    maps = []
    for i in valid:
        acc = None
        for inst in pose_set.instances:
            if not inst.is_valid(i):
                continue
            x, y, _ = inst.keypoints[i]
            sx, sy = scale_point(x, y, pose_set.image_size, out_size)
            g = gaussian_grid(out_size, round_half_up(sx), round_half_up(sy), sigma)
            acc = g if acc is None else np.maximum(acc, g)
        maps.append(acc)
    return maps, valid
