"""Rule-based spatial relations between annotated instances.

All geometry is taken from instance bounding boxes. Thresholds are module
constants so callers (and tests) see exactly which rule fired.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .scene import Box3, Scene

NEAREST_TIE_MARGIN = 0.01
BETWEEN_LATERAL_TOL = 0.5
SUPPORT_Z_TOL = 0.05
SUPPORT_MIN_OVERLAP = 0.5
STACK_MIN_OVERLAP = 0.2
NEAR_DISTANCE = 1.5
MAX_RELATIONS_PER_CAPTION = 3


class RelationKind(str, enum.Enum):
    NEAREST = "nearest"
    FARTHEST = "farthest"
    BETWEEN = "between"
    SUPPORTING = "supporting"
    SUPPORTED_BY = "supported_by"
    ABOVE = "above"
    BELOW = "below"
    NEAR = "near"

    @property
    def arity(self) -> int:
        return 2 if self is RelationKind.BETWEEN else 1


@dataclass(frozen=True)
class RelationStatement:
    kind: RelationKind
    target_id: int
    anchor_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "kind", RelationKind(self.kind))
        anchors = tuple(int(a) for a in self.anchor_ids)
        if self.kind is RelationKind.BETWEEN:
            anchors = tuple(sorted(anchors))
        object.__setattr__(self, "anchor_ids", anchors)
        if self.target_id in self.anchor_ids:
            raise ValueError(f"target {self.target_id} cannot be its own anchor")
        if len(self.anchor_ids) != self.kind.arity:
            raise ValueError(f"{self.kind.value} takes {self.kind.arity} anchor(s)")
        if len(set(self.anchor_ids)) != len(self.anchor_ids):
            raise ValueError("anchors must be distinct")

    @property
    def ids(self) -> tuple[int, ...]:
        return (self.target_id, *self.anchor_ids)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "target": self.target_id, "anchors": list(self.anchor_ids)}

    @classmethod
    def from_json(cls, data: Mapping) -> "RelationStatement":
        return cls(RelationKind(data["kind"]), int(data["target"]), tuple(data["anchors"]))


def _box(scene: Scene, instance_id: int) -> Box3:
    return scene.instance_box(instance_id)


def _center_distance(scene: Scene, a: int, b: int) -> float:
    return float(np.linalg.norm(_box(scene, a).center - _box(scene, b).center))


def _footprint_overlap(a: Box3, b: Box3) -> float:
    """Area of the xy-intersection of two boxes."""
    dx = min(a.max.x, b.max.x) - max(a.min.x, b.min.x)
    dy = min(a.max.y, b.max.y) - max(a.min.y, b.min.y)
    return max(dx, 0.0) * max(dy, 0.0)


def _footprint_area(b: Box3) -> float:
    return (b.max.x - b.min.x) * (b.max.y - b.min.y)


def _extreme_relation(scene: Scene, target_id: int, anchor_id: int, label: str | None, farthest: bool):
    target = scene.instance(target_id)
    scene.instance(anchor_id)
    if anchor_id == target_id:
        return None
    label = target.label if label is None else label
    if target.label != label:
        return None
    rivals = [i.id for i in scene.instances if i.label == label and i.id not in (target_id, anchor_id)]
    if not rivals:
        return None
    d_target = _center_distance(scene, target_id, anchor_id)
    for r in rivals:
        d = _center_distance(scene, r, anchor_id)
        if farthest and not d_target > d + NEAREST_TIE_MARGIN:
            return None
        if not farthest and not d_target + NEAREST_TIE_MARGIN < d:
            return None
    kind = RelationKind.FARTHEST if farthest else RelationKind.NEAREST
    return RelationStatement(kind, target_id, (anchor_id,))


def nearest_relation(scene: Scene, target_id: int, anchor_id: int, label: str | None = None):
    """``nearest`` if the target beats every other ``label`` instance by the tie margin.

    ``label`` defaults to the target's own label. Returns None when fewer than
    two such instances exist or when the closest two are within the margin.
    """
    return _extreme_relation(scene, target_id, anchor_id, label, farthest=False)


def farthest_relation(scene: Scene, target_id: int, anchor_id: int, label: str | None = None):
    return _extreme_relation(scene, target_id, anchor_id, label, farthest=True)


def between_relation(scene: Scene, target_id: int, anchor_a: int, anchor_b: int):
    if len({target_id, anchor_a, anchor_b}) != 3:
        raise ValueError("between needs three distinct instance ids")
    t = _box(scene, target_id).center
    a = _box(scene, anchor_a).center
    b = _box(scene, anchor_b).center
    seg = b - a
    length_sq = float(seg @ seg)
    if length_sq == 0.0:
        return None
    s = float((t - a) @ seg) / length_sq
    if not 0.0 < s < 1.0:
        return None
    lateral = float(np.linalg.norm(t - (a + s * seg)))
    if lateral >= BETWEEN_LATERAL_TOL:
        return None
    return RelationStatement(RelationKind.BETWEEN, target_id, (anchor_a, anchor_b))


def _rests_on(upper: Box3, lower: Box3) -> bool:
    gap = upper.min.z - lower.max.z
    if abs(gap) > SUPPORT_Z_TOL:
        return False
    area = _footprint_area(upper)
    if area <= 0.0:
        return False
    return _footprint_overlap(upper, lower) / area >= SUPPORT_MIN_OVERLAP


def support_relation(scene: Scene, upper_id: int, lower_id: int):
    """``supported_by`` (target = upper) when upper rests on lower's top face."""
    if upper_id == lower_id:
        raise ValueError("support needs two distinct instance ids")
    if _rests_on(_box(scene, upper_id), _box(scene, lower_id)):
        return RelationStatement(RelationKind.SUPPORTED_BY, upper_id, (lower_id,))
    return None


def supporting_relation(scene: Scene, lower_id: int, upper_id: int):
    if support_relation(scene, upper_id, lower_id) is None:
        return None
    return RelationStatement(RelationKind.SUPPORTING, lower_id, (upper_id,))


def _stacked_overlap(a: Box3, b: Box3) -> float:
    smaller = min(_footprint_area(a), _footprint_area(b))
    if smaller <= 0.0:
        return 0.0
    return _footprint_overlap(a, b) / smaller


def above_relation(scene: Scene, target_id: int, anchor_id: int):
    t, a = _box(scene, target_id), _box(scene, anchor_id)
    if t.min.z - a.max.z > 0.0 and _stacked_overlap(t, a) >= STACK_MIN_OVERLAP:
        return RelationStatement(RelationKind.ABOVE, target_id, (anchor_id,))
    return None


def below_relation(scene: Scene, target_id: int, anchor_id: int):
    if above_relation(scene, anchor_id, target_id) is None:
        return None
    return RelationStatement(RelationKind.BELOW, target_id, (anchor_id,))


def near_relation(scene: Scene, target_id: int, anchor_id: int):
    if target_id == anchor_id:
        return None
    if _center_distance(scene, target_id, anchor_id) <= NEAR_DISTANCE:
        return RelationStatement(RelationKind.NEAR, target_id, (anchor_id,))
    return None


def verify_relation(scene: Scene, s: RelationStatement) -> bool:
    """Re-derive a statement from scratch with its predicate."""
    k = s.kind
    if k is RelationKind.BETWEEN:
        return between_relation(scene, s.target_id, *s.anchor_ids) == s
    (anchor,) = s.anchor_ids
    predicate = {
        RelationKind.NEAREST: nearest_relation,
        RelationKind.FARTHEST: farthest_relation,
        RelationKind.SUPPORTED_BY: support_relation,
        RelationKind.SUPPORTING: supporting_relation,
        RelationKind.ABOVE: above_relation,
        RelationKind.BELOW: below_relation,
        RelationKind.NEAR: near_relation,
    }[k]
    return predicate(scene, s.target_id, anchor) == s


_INVERSE = {
    RelationKind.SUPPORTED_BY: RelationKind.SUPPORTING,
    RelationKind.SUPPORTING: RelationKind.SUPPORTED_BY,
    RelationKind.ABOVE: RelationKind.BELOW,
    RelationKind.BELOW: RelationKind.ABOVE,
}


def _fact_key(s: RelationStatement) -> tuple:
    """Statements that describe the same fact share a key (inverse pairs, near both ways)."""
    if s.kind in _INVERSE:
        canonical = min(s.kind, _INVERSE[s.kind], key=lambda k: k.value)
        pair = (s.target_id, s.anchor_ids[0])
        if canonical is not s.kind:
            pair = pair[::-1]
        return (canonical.value, pair)
    if s.kind is RelationKind.NEAR:
        return ("near", tuple(sorted(s.ids)))
    return (s.kind.value, s.target_id, s.anchor_ids)


def candidate_relations(scene: Scene, object_ids: Iterable[int]) -> list[RelationStatement]:
    """Every true statement whose target and anchors lie in ``object_ids``."""
    ids = sorted(set(object_ids))
    for i in ids:
        scene.instance(i)
    out: list[RelationStatement] = []
    for t, a in itertools.permutations(ids, 2):
        for pred in (nearest_relation, farthest_relation, support_relation, supporting_relation,
                     above_relation, below_relation, near_relation):
            s = pred(scene, t, a)
            if s is not None:
                out.append(s)
    for t in ids:
        for a, b in itertools.combinations([i for i in ids if i != t], 2):
            s = between_relation(scene, t, a, b)
            if s is not None:
                out.append(s)
    return out


def generate_relations(
    scene: Scene,
    object_ids: Iterable[int],
    seed: int,
    max_relations: int = MAX_RELATIONS_PER_CAPTION,
) -> list[RelationStatement]:
    """Sample up to ``max_relations`` distinct true facts, deterministically for ``seed``."""
    candidates = candidate_relations(scene, object_ids)
    if not candidates:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))
    chosen: list[RelationStatement] = []
    facts: set[tuple] = set()
    for idx in order:
        s = candidates[int(idx)]
        key = _fact_key(s)
        if key in facts:
            continue
        facts.add(key)
        chosen.append(s)
        if len(chosen) == max_relations:
            break
    return chosen


_PHRASES = {
    RelationKind.NEAREST: "the [{t}] is the closest {tl} to the [{a}]",
    RelationKind.FARTHEST: "the [{t}] is the farthest {tl} from the [{a}]",
    RelationKind.BETWEEN: "the [{t}] is between the [{a}] and the [{b}]",
    RelationKind.SUPPORTING: "the [{t}] is supporting the [{a}]",
    RelationKind.SUPPORTED_BY: "the [{t}] is supported by the [{a}]",
    RelationKind.ABOVE: "the [{t}] is above the [{a}]",
    RelationKind.BELOW: "the [{t}] is below the [{a}]",
    RelationKind.NEAR: "the [{t}] is near the [{a}]",
}


def render_relation_phrase(s: RelationStatement, labels: Mapping[int, str]) -> str:
    """Grounded markup for one statement, e.g. ``the [lamp 4] is supported by the [desk 2]``."""
    missing = [i for i in s.ids if i not in labels]
    if missing:
        raise KeyError(f"no label for instance id(s) {missing}")

    def tag(i: int) -> str:
        return f"{labels[i]} {i}"

    fields = {"t": tag(s.target_id), "tl": labels[s.target_id], "a": tag(s.anchor_ids[0])}
    if s.kind is RelationKind.BETWEEN:
        fields["b"] = tag(s.anchor_ids[1])
    return _PHRASES[s.kind].format(**fields)
