"""Pose-alignment metrics: OKS, OKS-thresholded mAP, prompt templates.

The matcher follows the COCO keypoint protocol: per image, predictions are
taken in descending score order and greedily claim the unmatched ground
truth with the highest OKS; a claim counts as a true positive when that
OKS clears the threshold. Average precision uses 101-point interpolated
precision, and mAP averages AP over thresholds 0.50:0.05:0.95, in percent.
"""
from __future__ import annotations

import dataclasses
import json
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .pose import PoseError, PoseInstance, PoseSet, SkeletonSpec

# Caption templates. <CLS> is the species word, <BG> the background type.
TEMPLATES: Dict[int, str] = {
    1: "A good photo of <CLS>.",
    2: "A photo of <CLS> in the <BG>.",
    3: "There is <CLS> on the <BG>",
    4: "There are some <CLS> lying in the <BG>.",
    5: "Some <CLS> are in the <BG>.",
    6: "A close photo of <CLS>.",
    7: "In the <BG>, there are several <CLS>.",
    8: "This is a clear photo of <CLS> in the <BG>.",
    9: "Several <CLS> are on the <BG>.",
    10: "A <CLS> stands on the <BG>.",
}

BACKGROUNDS: Tuple[str, ...] = (
    "grass or savanna",
    "forest or shrub",
    "mud or rock",
    "snowfield",
    "zoo or human habitation",
    "swamp or riverside",
    "desert or gobi",
    "mugshot",
)

OKS_THRESHOLDS: Tuple[float, ...] = tuple(
    round(0.50 + 0.05 * i, 2) for i in range(10)
)


def fill_prompt_template(template_id: int, species: str,
                         background: Optional[str] = None) -> str:
    """Substitute the species and background words into a caption template."""
    if template_id not in TEMPLATES:
        raise ValueError(f"unknown template id {template_id!r}; "
                         f"valid ids are 1..{len(TEMPLATES)}")
    text = TEMPLATES[template_id]
    if "<BG>" in text:
        if background is None:
            raise ValueError(
                f"template {template_id} needs a background type")
        text = text.replace("<BG>", background)
    return text.replace("<CLS>", species)


@dataclasses.dataclass(frozen=True)
class PredictedInstance:
    """One predicted pose: (x, y, score) per keypoint plus an instance score."""

    keypoints: Tuple[Tuple[float, float, float], ...]
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("instance score must be finite")
        for i, (x, y, s) in enumerate(self.keypoints):
            if not (math.isfinite(x) and math.isfinite(y)
                    and math.isfinite(s)):
                raise ValueError(f"keypoint {i} has non-finite values")

    def positions(self) -> List[Tuple[float, float]]:
        return [(x, y) for x, y, _ in self.keypoints]


@dataclasses.dataclass(frozen=True)
class PredictionSet:
    """Predicted instances grouped by image id."""

    spec_name: str
    by_image: Mapping[str, Tuple[PredictedInstance, ...]]

    def instances(self, image_id: str) -> Tuple[PredictedInstance, ...]:
        return self.by_image.get(image_id, ())


def load_predictions(path, spec: SkeletonSpec) -> PredictionSet:
    """Load the prediction JSON, reporting the offending row on errors.

    Schema: [{"image_id": ..., "instances": [{"keypoints": [[x, y, score],
    ...], "score": ...}]}].
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ValueError("prediction file must contain a JSON list")
    by_image: Dict[str, Tuple[PredictedInstance, ...]] = {}
    for row, entry in enumerate(doc):
        where = f"entry {row}"
        if not isinstance(entry, dict) or "image_id" not in entry:
            raise ValueError(f"{where}: expected an object with 'image_id'")
        image_id = str(entry["image_id"])
        if image_id in by_image:
            raise ValueError(f"{where}: duplicate image id {image_id!r}")
        instances = []
        for j, inst in enumerate(entry.get("instances", [])):
            where_j = f"{where} (image {image_id!r}), instance {j}"
            if not isinstance(inst, dict):
                raise ValueError(f"{where_j}: expected an object")
            kps = inst.get("keypoints")
            if not isinstance(kps, list) or len(kps) != spec.n:
                raise ValueError(
                    f"{where_j}: 'keypoints' must list {spec.n} triples")
            triples = []
            for k, kp in enumerate(kps):
                if not isinstance(kp, list) or len(kp) != 3:
                    raise ValueError(
                        f"{where_j}: keypoint {k} must be [x, y, score]")
                triples.append((float(kp[0]), float(kp[1]), float(kp[2])))
            try:
                instances.append(
                    PredictedInstance(tuple(triples),
                                      float(inst.get("score", 0.0))))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{where_j}: {exc}") from exc
        by_image[image_id] = tuple(instances)
    return PredictionSet(spec.name, by_image)


def oks(pred: PoseInstance | Sequence[Tuple[float, float]],
        gt: PoseInstance, gt_area: float,
        sigmas: Sequence[float]) -> float:
    """Object keypoint similarity between a prediction and a ground truth.

    Averages exp(-d^2 / (2 * s^2 * k^2)) over the gt keypoints with v > 0,
    with s^2 = gt_area and k = 2 * sigma. Predictions for invalid gt
    keypoints do not contribute.
    """
    if gt_area <= 0:
        raise ValueError("gt_area must be positive")
    if isinstance(pred, PoseInstance):
        positions = [(x, y) for x, y, _ in pred.keypoints]
    else:
        positions = list(pred)
    if len(positions) != len(gt.keypoints):
        raise ValueError("prediction and ground truth keypoint counts differ")
    if len(sigmas) != len(gt.keypoints):
        raise ValueError("sigma count does not match keypoint count")
    total = 0.0
    count = 0
    for (px, py), (gx, gy, v), sigma in zip(positions, gt.keypoints, sigmas):
        if v > 0:
            d2 = (px - gx) ** 2 + (py - gy) ** 2
            k = 2.0 * sigma
            total += math.exp(-d2 / (2.0 * gt_area * k * k))
            count += 1
    if count == 0:
        raise PoseError("ground truth has no valid keypoints")
    return total / count


def _gt_area(pose_set: PoseSet, inst: PoseInstance) -> float:
    if inst.area is not None:
        return inst.area
    # Fall back to the valid-keypoint bounding box.
    pts = [(x, y) for x, y, v in inst.keypoints if v > 0]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return max(max(xs) - min(xs), 1.0) * max(max(ys) - min(ys), 1.0)


def _average_precision(scores: np.ndarray, image_ids: List[str],
                       ranks: np.ndarray, is_tp: np.ndarray,
                       n_gt: int) -> Optional[float]:
    """101-point interpolated AP; score ties break on (image_id, rank)."""
    if n_gt == 0:
        return None
    if scores.size == 0:
        return 0.0
    order = sorted(range(scores.size),
                   key=lambda i: (-scores[i], image_ids[i], ranks[i]))
    tp_flags = is_tp[order]
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Envelope: precision at recall r becomes the max precision at >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    sample_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, sample_points, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.sum() / 101.0)


def pose_map(preds: PredictionSet, gts: Sequence[PoseSet],
             sigmas: Optional[Sequence[float]] = None,
             thresholds: Sequence[float] = OKS_THRESHOLDS) -> Dict:
    """OKS-thresholded mAP over a ground-truth set, in percent."""
    if not gts:
        raise ValueError("no ground-truth images")
    spec = gts[0].spec
    if preds.spec_name != spec.name:
        raise ValueError(f"prediction skeleton {preds.spec_name!r} does not "
                         f"match ground truth {spec.name!r}")
    if sigmas is None:
        if spec.oks_sigmas is None:
            raise ValueError("skeleton has no per-keypoint sigmas")
        sigmas = spec.oks_sigmas
    seen = set()
    for g in gts:
        if g.image_id is None:
            raise ValueError("every ground-truth pose set needs an image_id")
        if g.image_id in seen:
            raise ValueError(f"duplicate ground-truth image id {g.image_id!r}")
        seen.add(g.image_id)

    # One OKS matrix per image, shared across thresholds.
    per_image = []
    n_gt = 0
    for g in gts:
        image_id = str(g.image_id)
        scorable = [inst for inst in g.instances
                    if any(v > 0 for _, _, v in inst.keypoints)]
        n_gt += len(scorable)
        ordered = sorted(enumerate(preds.instances(image_id)),
                         key=lambda p: (-p[1].score, p[0]))
        matrix = np.zeros((len(ordered), len(scorable)), dtype=np.float64)
        for r, (_, pred) in enumerate(ordered):
            for c, gt_inst in enumerate(scorable):
                matrix[r, c] = oks(pred.positions(), gt_inst,
                                   _gt_area(g, gt_inst), sigmas)
        matrix.setflags(write=False)
        per_image.append((image_id, ordered, matrix))

    per_threshold: Dict[str, float] = {}
    aps = []
    for thr in thresholds:
        scores, ids, ranks, flags = [], [], [], []
        for image_id, ordered, matrix in per_image:
            taken = np.zeros(matrix.shape[1], dtype=bool)
            for r, (rank, pred) in enumerate(ordered):
                matched = False
                if matrix.shape[1]:
                    row = np.where(taken, -1.0, matrix[r])
                    best = int(np.argmax(row))
                    if row[best] >= thr:
                        taken[best] = True
                        matched = True
                scores.append(pred.score)
                ids.append(image_id)
                ranks.append(rank)
                flags.append(matched)
        ap = _average_precision(np.asarray(scores, dtype=np.float64), ids,
                                np.asarray(ranks), np.asarray(flags, dtype=bool),
                                n_gt)
        value = 0.0 if ap is None else ap * 100.0
        per_threshold[f"{thr:.2f}"] = value
        aps.append(value)
    return {
        "mAP": float(sum(aps) / len(aps)),
        "per_threshold": per_threshold,
        "n_gt_instances": n_gt,
    }


def evaluate_generations(preds: PredictionSet, gts: Sequence[PoseSet],
                         sigmas: Optional[Sequence[float]] = None) -> Dict:
    """Score a prediction set against ground truths and build the report."""
    gt_ids = {str(g.image_id) for g in gts}
    missing = sorted(gt_ids - set(preds.by_image))
    if missing:
        raise ValueError(f"predictions missing image ids: {missing}")
    result = pose_map(preds, gts, sigmas)
    return {
        "mAP": result["mAP"],
        "per_threshold": result["per_threshold"],
        "n_images": len(gts),
        "n_gt_instances": result["n_gt_instances"],
        "fid": "not computed",
        "clip_score": "not computed",
        "detection_ap75": "not computed",
    }


def centroid_estimator(image: np.ndarray, spec: SkeletonSpec,
                       color_tolerance: float = 0.3) -> PredictedInstance:
    """Detect colored keypoint blobs by per-color connected components.

    Each pixel is assigned to the nearest keypoint color when within
    color_tolerance (euclidean RGB distance); the largest connected
    component per color yields that keypoint's centroid. Missing colors
    score 0 at position (0, 0).
    """
    from scipy import ndimage

    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    palette = np.asarray(spec.render_colors, dtype=np.float64) / 255.0
    flat = image.reshape(-1, 3).astype(np.float64)
    d2 = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    within = d2[np.arange(flat.shape[0]), nearest] <= color_tolerance ** 2
    assigned = np.where(within, nearest, -1).reshape(image.shape[:2])

    keypoints = []
    found = 0
    for i in range(spec.n):
        mask = assigned == i
        if not mask.any():
            keypoints.append((0.0, 0.0, 0.0))
            continue
        labels, count = ndimage.label(mask)
        sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                                   index=range(1, count + 1))
        largest = int(np.argmax(sizes)) + 1
        cy, cx = ndimage.center_of_mass(labels == largest)
        keypoints.append((float(cx), float(cy), 1.0))
        found += 1
    return PredictedInstance(tuple(keypoints), score=found / spec.n)
