"""Synthetic desk-scale dataset: colored keypoint blobs on textured ground.

Each sample is a randomly affine-perturbed template quadruped whose valid
keypoints are painted as hard-edged disks of their designated colors over a
low-contrast textured background. The template keypoints keep a minimum
pairwise separation of 0.21 in unit coordinates, so at 64 x 64 and above
(scale >= 0.5 * min(H, W), jitter <= 0.75 px per axis, radius 2) no two
disks ever share a pixel and every valid keypoint stays recoverable by the
per-color centroid detector.
"""
from __future__ import annotations

import colorsys
import dataclasses
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .evaluation import BACKGROUNDS, TEMPLATES, fill_prompt_template
from .pose import PoseInstance, PoseSet, SkeletonSpec
from .raster import paint_disk

# Unit-square template, facing left, in the skeleton's keypoint order:
# left eye, right eye, nose, neck, root of tail, left shoulder, left elbow,
# left front paw, right shoulder, right elbow, right front paw, left hip,
# left knee, left back paw, right hip, right knee, right back paw.
TEMPLATE_POSE: Tuple[Tuple[float, float], ...] = (
    (0.10, 0.12),
    (0.30, 0.04),
    (0.02, 0.38),
    (0.34, 0.26),
    (0.95, 0.30),
    (0.30, 0.50),
    (0.26, 0.72),
    (0.22, 0.96),
    (0.52, 0.44),
    (0.50, 0.68),
    (0.46, 0.94),
    (0.74, 0.52),
    (0.70, 0.76),
    (0.68, 0.99),
    (0.97, 0.55),
    (0.94, 0.79),
    (0.92, 1.00),
)

SPECIES: Tuple[str, ...] = (
    "dog", "cat", "horse", "antelope", "tiger", "fox", "deer", "wolf",
    "sheep", "bear", "rabbit", "monkey", "panda", "cow", "zebra", "giraffe",
)

MIN_VALID_KEYPOINTS = 4


@dataclasses.dataclass(frozen=True)
class SyntheticSample:
    """One training sample: blob image, its pose annotation, its caption."""

    image: np.ndarray
    pose_set: PoseSet
    caption: str


def _textured_background(rng: np.random.Generator, size: Tuple[int, int],
                         tint: Tuple[float, float, float]) -> np.ndarray:
    """Smooth gray noise in [0.25, 0.55], mildly tinted per species."""
    from scipy import ndimage

    h, w = size
    coarse = rng.uniform(0.25, 0.55, size=(5, 5))
    gray = ndimage.zoom(coarse, (h / 5, w / 5), order=1, mode="nearest")
    gray = gray[:h, :w]
    tint_arr = np.asarray(tint, dtype=np.float64)
    return gray[:, :, None] * (0.85 + 0.15 * tint_arr[None, None, :])


def _species_tint(species: str) -> Tuple[float, float, float]:
    hue = SPECIES.index(species) / len(SPECIES)
    return colorsys.hsv_to_rgb(hue, 1.0, 1.0)


def _perturbed_keypoints(rng: np.random.Generator, size: Tuple[int, int],
                         margin: float) -> np.ndarray:
    """Rotate, scale, place, and jitter the template inside the margins."""
    h, w = size
    pts = np.asarray(TEMPLATE_POSE, dtype=np.float64) - 0.5
    theta = rng.uniform(-np.deg2rad(25.0), np.deg2rad(25.0))
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    scale = rng.uniform(0.5, 0.75) * min(h, w)
    rotated = pts @ rot.T
    # Shrink if the rotated pose cannot fit between the margins.
    span_x = rotated[:, 0].max() - rotated[:, 0].min()
    span_y = rotated[:, 1].max() - rotated[:, 1].min()
    fit = min((w - 1 - 2 * margin) / span_x, (h - 1 - 2 * margin) / span_y)
    scale = min(scale, fit)
    placed = rotated * scale
    lo_x = margin - placed[:, 0].min()
    hi_x = max(w - 1 - margin - placed[:, 0].max(), lo_x)
    lo_y = margin - placed[:, 1].min()
    hi_y = max(h - 1 - margin - placed[:, 1].max(), lo_y)
    center = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
    placed = placed + center
    placed = placed + rng.uniform(-0.75, 0.75, size=placed.shape)
    placed[:, 0] = np.clip(placed[:, 0], margin, w - 1 - margin)
    placed[:, 1] = np.clip(placed[:, 1], margin, h - 1 - margin)
    return placed


def _draw_visibility(rng: np.random.Generator, n: int) -> List[int]:
    vis = [2 if rng.random() < 0.85 else 0 for _ in range(n)]
    # Repair deterministically so at least MIN_VALID_KEYPOINTS survive.
    hidden = [i for i, v in enumerate(vis) if v == 0]
    need = MIN_VALID_KEYPOINTS - (n - len(hidden))
    for i in hidden[:max(0, need)]:
        vis[i] = 2
    return vis


def make_synthetic_sample(spec: SkeletonSpec, seed: int, index: int,
                          image_size: Tuple[int, int] = (64, 64),
                          point_radius: int = 2) -> SyntheticSample:
    """Build sample `index` of the dataset seeded by `seed`."""
    rng = np.random.default_rng((seed, index))
    h, w = image_size
    margin = point_radius + 2.0

    placed = _perturbed_keypoints(rng, image_size, margin)
    vis = _draw_visibility(rng, spec.n)
    keypoints = [(float(x), float(y), v)
                 for (x, y), v in zip(placed, vis)]

    valid = [(x, y) for x, y, v in keypoints if v > 0]
    xs = [p[0] for p in valid]
    ys = [p[1] for p in valid]
    x0 = min(xs) - point_radius
    y0 = min(ys) - point_radius
    bw = max(xs) - min(xs) + 2 * point_radius
    bh = max(ys) - min(ys) + 2 * point_radius
    instance = PoseInstance(tuple(keypoints), bbox=(x0, y0, bw, bh),
                            area=bw * bh)

    species = str(rng.choice(SPECIES))
    background = str(rng.choice(BACKGROUNDS))
    template_id = int(rng.integers(1, len(TEMPLATES) + 1))
    caption = fill_prompt_template(template_id, species, background)

    pose_set = PoseSet(spec, image_size, (instance,), caption=caption,
                       category=species,
                       image_id=f"synth-{seed}-{index:05d}")

    image = _textured_background(rng, image_size, _species_tint(species))
    owner = np.full((h, w), -1, dtype=np.int32)
    for i, (x, y, v) in enumerate(keypoints):
        if v > 0:
            paint_disk(owner, x, y, float(point_radius), i)
    palette = np.asarray(spec.render_colors, dtype=np.float64) / 255.0
    mask = owner >= 0
    image[mask] = palette[owner[mask]]
    return SyntheticSample(image.astype(np.float32), pose_set, caption)


def make_synthetic_dataset(count: int, spec: SkeletonSpec, seed: int,
                           image_size: Tuple[int, int] = (64, 64),
                           point_radius: int = 2) -> List[SyntheticSample]:
    """Deterministic blob dataset; sample i depends only on (seed, i)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [make_synthetic_sample(spec, seed, i, image_size, point_radius)
            for i in range(count)]
