"""Sparse-pose data model: skeleton specs, keypoint instances, and pose I/O.

Coordinate convention is COCO's: origin at the top-left corner, x grows
rightward, y grows downward, continuous pixel units. A keypoint is valid
iff its visibility flag v >= 1; v = 1 and v = 2 behave identically
everywhere except serialization. Keypoints outside the image rectangle are
kept and only clipped at render time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Optional, Sequence, Union

Keypoint = tuple[float, float, int]
Edge = tuple[int, int]


class PoseError(ValueError):
    """A skeleton spec or pose document violates its contract."""


# ---------------------------------------------------------------------------
# Skeleton spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkeletonSpec:
    """Shared pose vocabulary: keypoint names, topology, OKS constants, colors."""

    name: str
    keypoint_names: tuple[str, ...]
    edges: tuple[Edge, ...]
    oks_sigmas: tuple[float, ...]
    render_colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        n = len(self.keypoint_names)
        if n < 1:
            raise PoseError("skeleton needs at least one keypoint")
        if len(set(self.keypoint_names)) != n:
            raise PoseError("keypoint names must be unique")
        if len(self.oks_sigmas) != n:
            raise PoseError(
                f"expected {n} oks_sigmas, got {len(self.oks_sigmas)}"
            )
        if len(self.render_colors) != n:
            raise PoseError(
                f"expected {n} render colors, got {len(self.render_colors)}"
            )
        for s in self.oks_sigmas:
            if not s > 0:
                raise PoseError(f"oks sigma must be positive, got {s}")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise PoseError(f"edge ({i}, {j}) references a missing keypoint")
            if i == j:
                raise PoseError(f"edge ({i}, {j}) is a self-loop")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise PoseError(f"edge ({i}, {j}) is a duplicate")
            seen.add(key)

    @property
    def n(self) -> int:
        return len(self.keypoint_names)

    def keypoint_index(self, name: str) -> int:
        return self.keypoint_names.index(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "keypoints": list(self.keypoint_names),
            "edges": [list(e) for e in self.edges],
            "oks_sigmas": list(self.oks_sigmas),
            "colors": [list(c) for c in self.render_colors],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SkeletonSpec":
        try:
            return cls(
                name=str(d["name"]),
                keypoint_names=tuple(str(k) for k in d["keypoints"]),
                edges=tuple((int(i), int(j)) for i, j in d["edges"]),
                oks_sigmas=tuple(float(s) for s in d["oks_sigmas"]),
                render_colors=tuple(
                    (int(r), int(g), int(b)) for r, g, b in d["colors"]
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, PoseError):
                raise
            raise PoseError(f"malformed skeleton document: {exc}") from exc


def skeleton_to_json(spec: SkeletonSpec) -> str:
    """Canonical serialization (sorted keys, fixed separators)."""
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))


def load_skeleton_spec(path) -> SkeletonSpec:
    """Load and validate a skeleton spec from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PoseError(f"cannot parse skeleton file {path}: {exc}") from exc
    return SkeletonSpec.from_dict(raw)


def default_skeleton() -> SkeletonSpec:
    """The bundled 17-keypoint quadruped skeleton."""
    raw = resources.files("sparsepose.data").joinpath("ap10k.json").read_text()
    return SkeletonSpec.from_dict(json.loads(raw))


# ---------------------------------------------------------------------------
# Pose instances and sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseInstance:
    """One object's keypoints as (x, y, v) triples plus optional box stats."""

    keypoints: tuple[Keypoint, ...]
    bbox: Optional[tuple[float, float, float, float]] = None
    area: Optional[float] = None

    def __post_init__(self):
        for idx, (x, y, v) in enumerate(self.keypoints):
            if v not in (0, 1, 2):
                raise PoseError(f"keypoint {idx}: visibility {v} not in {{0,1,2}}")
            if v >= 1 and not (math.isfinite(x) and math.isfinite(y)):
                raise PoseError(f"keypoint {idx}: non-finite coordinates")

    @property
    def n(self) -> int:
        return len(self.keypoints)

    def is_valid(self, i: int) -> bool:
        return self.keypoints[i][2] >= 1

    def valid_indices(self) -> list[int]:
        return [i for i, (_, _, v) in enumerate(self.keypoints) if v >= 1]


@dataclass(frozen=True)
class PoseSet:
    """All pose instances of one image, sharing a single skeleton spec."""

    spec: SkeletonSpec
    image_size: tuple[int, int]  # (H, W)
    instances: tuple[PoseInstance, ...] = ()
    caption: Optional[str] = None
    category: Optional[str] = None
    image_id: Optional[Union[int, str]] = None

    def __post_init__(self):
        h, w = self.image_size
        if h < 8 or w < 8:
            raise PoseError(f"image size {self.image_size} below the 8px minimum")
        for k, inst in enumerate(self.instances):
            if inst.n != self.spec.n:
                raise PoseError(
                    f"instance {k} has {inst.n} keypoints, spec wants {self.spec.n}"
                )

    def valid_union(self) -> list[int]:
        """Keypoint indices valid in at least one instance, in spec order."""
        seen = set()
        for inst in self.instances:
            seen.update(inst.valid_indices())
        return sorted(seen)


# ---------------------------------------------------------------------------
# Editing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Move:
    index: int
    dx: float
    dy: float


@dataclass(frozen=True)
class SetVisibility:
    index: int
    v: int


@dataclass(frozen=True)
class Affine:
    scale: float
    tx: float
    ty: float


PoseEdit = Union[Move, SetVisibility, Affine]


def edit_pose(pose: PoseInstance, edit: PoseEdit) -> PoseInstance:
    """Apply one edit and return a new instance; the input is untouched."""
    n = pose.n
    if isinstance(edit, Move):
        if not 0 <= edit.index < n:
            raise PoseError(f"keypoint index {edit.index} out of range [0, {n})")
        x, y, v = pose.keypoints[edit.index]
        kps = list(pose.keypoints)
        kps[edit.index] = (x + edit.dx, y + edit.dy, v)
        return replace(pose, keypoints=tuple(kps))
    if isinstance(edit, SetVisibility):
        if not 0 <= edit.index < n:
            raise PoseError(f"keypoint index {edit.index} out of range [0, {n})")
        if edit.v not in (0, 1, 2):
            raise PoseError(f"visibility {edit.v} not in {{0,1,2}}")
        x, y, _ = pose.keypoints[edit.index]
        kps = list(pose.keypoints)
        kps[edit.index] = (x, y, edit.v)
        return replace(pose, keypoints=tuple(kps))
    if isinstance(edit, Affine):
        if not edit.scale > 0:
            raise PoseError(f"affine scale must be positive, got {edit.scale}")
        s, tx, ty = edit.scale, edit.tx, edit.ty
        kps = tuple(
            (s * x + tx, s * y + ty, v) if v >= 1 else (x, y, v)
            for x, y, v in pose.keypoints
        )
        bbox = pose.bbox
        if bbox is not None:
            bx, by, bw, bh = bbox
            bbox = (s * bx + tx, s * by + ty, s * bw, s * bh)
        area = pose.area if pose.area is None else pose.area * s * s
        return replace(pose, keypoints=kps, bbox=bbox, area=area)
    raise PoseError(f"unknown edit {edit!r}")


# ---------------------------------------------------------------------------
# Serialization (pose document JSON)
# ---------------------------------------------------------------------------


def _instance_to_dict(inst: PoseInstance) -> dict:
    d: dict = {"keypoints": [[x, y, v] for x, y, v in inst.keypoints]}
    if inst.bbox is not None:
        d["bbox"] = list(inst.bbox)
    if inst.area is not None:
        d["area"] = inst.area
    return d


def serialize_pose(pose_set: PoseSet) -> str:
    """Serialize to the pose document JSON; round-trips bit-exactly."""
    h, w = pose_set.image_size
    doc = {
        "image_size": [h, w],
        "caption": pose_set.caption,
        "category": pose_set.category,
        "instances": [_instance_to_dict(inst) for inst in pose_set.instances],
    }
    return json.dumps(doc, sort_keys=True)


def parse_pose_document(text_or_dict: Union[str, Mapping], spec: SkeletonSpec) -> PoseSet:
    """Parse a pose document (JSON text or already-decoded dict)."""
    if isinstance(text_or_dict, str):
        try:
            doc = json.loads(text_or_dict)
        except json.JSONDecodeError as exc:
            raise PoseError(f"cannot parse pose document: {exc}") from exc
    else:
        doc = text_or_dict
    try:
        h, w = doc["image_size"]
        instances = []
        for raw in doc.get("instances", []):
            kps = tuple((float(x), float(y), int(v)) for x, y, v in raw["keypoints"])
            bbox = raw.get("bbox")
            instances.append(
                PoseInstance(
                    keypoints=kps,
                    bbox=tuple(float(b) for b in bbox) if bbox is not None else None,
                    area=float(raw["area"]) if raw.get("area") is not None else None,
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, PoseError):
            raise
        raise PoseError(f"malformed pose document: {exc}") from exc
    return PoseSet(
        spec=spec,
        image_size=(int(h), int(w)),
        instances=tuple(instances),
        caption=doc.get("caption"),
        category=doc.get("category"),
    )


def load_pose_document(path, spec: SkeletonSpec) -> PoseSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_pose_document(fh.read(), spec)


# ---------------------------------------------------------------------------
# COCO ingestion
# ---------------------------------------------------------------------------


def parse_coco_keypoints(annotation_file, spec: SkeletonSpec) -> list[PoseSet]:
    """Ingest a COCO-format keypoint annotation file, one PoseSet per image.

    Keypoints with v = 0 are preserved; their positions are ignored
    downstream. Images appear in the file's image-list order.
    """
    with open(annotation_file, "r", encoding="utf-8") as fh:
        try:
            coco = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PoseError(f"cannot parse {annotation_file}: {exc}") from exc

    images = {img["id"]: img for img in coco.get("images", [])}
    grouped: dict = {img_id: [] for img_id in images}
    for ann in coco.get("annotations", []):
        img_id = ann["image_id"]
        if img_id not in images:
            raise PoseError(
                f"annotation {ann.get('id')} references missing image {img_id}"
            )
        flat = ann["keypoints"]
        if len(flat) != 3 * spec.n:
            raise PoseError(
                f"annotation {ann.get('id')}: keypoints array has length "
                f"{len(flat)}, expected {3 * spec.n}"
            )
        kps = tuple(
            (float(flat[3 * i]), float(flat[3 * i + 1]), int(flat[3 * i + 2]))
            for i in range(spec.n)
        )
        bbox = ann.get("bbox")
        grouped[img_id].append(
            PoseInstance(
                keypoints=kps,
                bbox=tuple(float(b) for b in bbox) if bbox is not None else None,
                area=float(ann["area"]) if ann.get("area") is not None else None,
            )
        )

    pose_sets = []
    for img_id, img in images.items():
        pose_sets.append(
            PoseSet(
                spec=spec,
                image_size=(int(img["height"]), int(img["width"])),
                instances=tuple(grouped[img_id]),
                caption=img.get("caption"),
                image_id=img_id,
            )
        )
    return pose_sets
