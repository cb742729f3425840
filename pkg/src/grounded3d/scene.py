"""Scene geometry: point clouds, instance annotations, boxes and IoU primitives."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SceneValidationError(ValueError):
    """A scene file parsed but violates a structural invariant."""

    def __init__(self, message: str, instance_id: int | None = None):
        super().__init__(message)
        self.instance_id = instance_id


class SceneParseError(ValueError):
    """Malformed scene JSON; ``offset`` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite coordinate in {self!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box in world coordinates (meters)."""

    min: Vec3
    max: Vec3

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min.as_tuple(), self.max.as_tuple())):
            raise ValueError(f"box min exceeds max: {self!r}")

    @classmethod
    def from_bounds(cls, lo: Sequence[float], hi: Sequence[float]) -> "Box3":
        return cls(Vec3(*map(float, lo)), Vec3(*map(float, hi)))

    @property
    def center(self) -> np.ndarray:
        return (self.min.as_array() + self.max.as_array()) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max.as_array() - self.min.as_array()

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, p: Sequence[float]) -> bool:
        return all(lo <= v <= hi for lo, v, hi in zip(self.min.as_tuple(), p, self.max.as_tuple()))

    def to_json(self) -> list[list[float]]:
        return [list(self.min.as_tuple()), list(self.max.as_tuple())]

    @classmethod
    def from_json(cls, data) -> "Box3":
        if not (isinstance(data, (list, tuple)) and len(data) == 2 and all(len(v) == 3 for v in data)):
            raise ValueError(f"a box is [[xmin, ymin, zmin], [xmax, ymax, zmax]], got {data!r}")
        return cls.from_bounds(data[0], data[1])


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)
    colors: np.ndarray | None = None  # (n, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise SceneValidationError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise SceneValidationError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=float).reshape(-1, 3)
            if len(cols) != len(pts):
                raise SceneValidationError(
                    f"{len(cols)} colors for {len(pts)} points"
                )
            cols.setflags(write=False)
            object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    label: str
    mask: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "mask", frozenset(int(i) for i in self.mask))


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    cloud: PointCloud
    instances: tuple[InstanceAnnotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        n = len(self.cloud)
        seen_ids: set[int] = set()
        owner: dict[int, int] = {}
        for inst in self.instances:
            if inst.id in seen_ids:
                raise SceneValidationError(f"duplicate instance id {inst.id}", inst.id)
            seen_ids.add(inst.id)
            if not inst.mask:
                raise SceneValidationError(f"instance {inst.id} has an empty mask", inst.id)
            bad = [i for i in inst.mask if i < 0 or i >= n]
            if bad:
                raise SceneValidationError(
                    f"instance {inst.id} has point index {min(bad)} outside [0, {n})", inst.id
                )
            for i in inst.mask:
                if i in owner:
                    raise SceneValidationError(
                        f"instance {inst.id} overlaps instance {owner[i]} at point {i}", inst.id
                    )
                owner[i] = inst.id

    @property
    def ids(self) -> list[int]:
        return [inst.id for inst in self.instances]

    def instance(self, instance_id: int) -> InstanceAnnotation:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(f"scene {self.scene_id!r} has no instance {instance_id}")

    def labels(self) -> dict[int, str]:
        return {inst.id: inst.label for inst in self.instances}

    def instance_box(self, instance_id: int) -> Box3:
        return box_from_mask(self, self.instance(instance_id).mask)


def box_from_mask(scene: Scene, mask: Iterable[int]) -> Box3:
    """Tight axis-aligned box around the masked points."""
    idx = sorted(set(int(i) for i in mask))
    if not idx:
        raise ValueError("cannot build a box from an empty mask")
    n = len(scene.cloud)
    if idx[0] < 0 or idx[-1] >= n:
        raise IndexError(f"mask index outside [0, {n})")
    pts = scene.cloud.points[idx]
    return Box3.from_bounds(pts.min(axis=0), pts.max(axis=0))


def _is_degenerate(b: Box3) -> bool:
    return b.volume <= 0.0


def box_iou(a: Box3, b: Box3) -> float:
    """Volumetric IoU. Degenerate boxes score 1 only against an identical box."""
    if _is_degenerate(a) or _is_degenerate(b):
        return 1.0 if a == b else 0.0
    lo = np.maximum(a.min.as_array(), b.min.as_array())
    hi = np.minimum(a.max.as_array(), b.max.as_array())
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def mask_iou(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


# -- serialization -------------------------------------------------------------

def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def scene_from_dict(data: dict) -> Scene:
    if not isinstance(data, dict):
        raise SceneValidationError("scene document must be a JSON object")
    for key in ("scene_id", "points", "instances"):
        if key not in data:
            raise SceneValidationError(f"missing key {key!r}")
    try:
        points = np.asarray(data["points"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SceneValidationError(f"bad points array: {exc}") from exc
    if points.ndim != 2 or points.shape[1] != 3:
        raise SceneValidationError(f"points must be an (n, 3) array, got shape {points.shape}")
    colors = data.get("colors")
    cloud = PointCloud(points, None if colors is None else np.asarray(colors, dtype=float))
    instances = []
    for raw in data["instances"]:
        inst_id = raw.get("id")
        if not isinstance(inst_id, int) or isinstance(inst_id, bool):
            raise SceneValidationError(f"instance id must be an integer, got {inst_id!r}", None)
        if not isinstance(raw.get("label"), str):
            raise SceneValidationError(f"instance {inst_id} has no text label", inst_id)
        indices = raw.get("point_indices", [])
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in indices):
            raise SceneValidationError(f"instance {inst_id} has non-integer point indices", inst_id)
        if len(set(indices)) != len(indices):
            raise SceneValidationError(f"instance {inst_id} repeats a point index", inst_id)
        instances.append(InstanceAnnotation(inst_id, raw["label"], frozenset(indices)))
    return Scene(str(data["scene_id"]), cloud, tuple(instances))


def scene_to_dict(scene: Scene) -> dict:
    out: dict = {
        "scene_id": scene.scene_id,
        "points": scene.cloud.points.tolist(),
    }
    if scene.cloud.colors is not None:
        out["colors"] = scene.cloud.colors.tolist()
    out["instances"] = [
        {"id": inst.id, "label": inst.label, "point_indices": sorted(inst.mask)}
        for inst in scene.instances
    ]
    return out


def loads_scene(text: str) -> Scene:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(exc.msg, _byte_offset(text, exc.pos)) from exc
    return scene_from_dict(data)


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def load_scene(path: str | Path) -> Scene:
    return loads_scene(Path(path).read_text(encoding="utf-8"))


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def load_scenes(path: str | Path) -> list[Scene]:
    """Load one scene file or every ``*.json`` in a directory, ordered by scene_id."""
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    return sorted((load_scene(f) for f in files), key=lambda s: s.scene_id)
