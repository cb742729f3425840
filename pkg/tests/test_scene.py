import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grounded3d.scene import (
    Box3,
    InstanceAnnotation,
    PointCloud,
    Scene,
    SceneParseError,
    SceneValidationError,
    box_from_mask,
    box_iou,
    dumps_scene,
    load_scenes,
    loads_scene,
    mask_iou,
    save_scene,
    scene_to_dict,
)
from grounded3d.synthetic import make_scene

coord = st.floats(-10, 10, allow_nan=False, width=32)


@st.composite
def boxes(draw, min_size=0.125):
    lo = [draw(coord) for _ in range(3)]
    size = [draw(st.floats(min_size, 5, width=32)) for _ in range(3)]
    return Box3.from_bounds(lo, [a + s for a, s in zip(lo, size)])


def voxel_iou(a: Box3, b: Box3, step: float) -> float:
    """IoU by counting cell centres of a regular grid."""
    lo = np.minimum(a.min.as_array(), b.min.as_array())
    hi = np.maximum(a.max.as_array(), b.max.as_array())
    axes = [np.arange(l + step / 2, h, step) for l, h in zip(lo, hi)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    ina = np.all((g >= a.min.as_array()) & (g <= a.max.as_array()), axis=1)
    inb = np.all((g >= b.min.as_array()) & (g <= b.max.as_array()), axis=1)
    return (ina & inb).sum() / (ina | inb).sum()


def test_box_from_mask_is_tight():
    pts = np.array([[0, 0, 0], [1, 2, 3], [0.5, -1, 1], [9, 9, 9]], dtype=float)
    scene = Scene("s", PointCloud(pts), (InstanceAnnotation(1, "x", {0, 1, 2}),))
    b = box_from_mask(scene, {0, 1, 2})
    assert b.min.as_tuple() == (0, -1, 0)
    assert b.max.as_tuple() == (1, 2, 3)


def test_single_point_box_is_degenerate():
    scene = Scene("s", PointCloud(np.array([[1.0, 2.0, 3.0]])), (InstanceAnnotation(1, "x", {0}),))
    b = box_from_mask(scene, {0})
    assert b.volume == 0
    assert box_iou(b, b) == 1.0
    assert box_iou(b, Box3.from_bounds((0, 0, 0), (5, 5, 5))) == 0.0


def test_empty_mask_rejected():
    scene = Scene("s", PointCloud(np.zeros((2, 3))), ())
    with pytest.raises(ValueError):
        box_from_mask(scene, set())


def test_box_iou_known_values():
    a = Box3.from_bounds((0, 0, 0), (2, 1, 1))
    b = Box3.from_bounds((1, 0, 0), (3, 1, 1))
    assert box_iou(a, b) == pytest.approx(1 / 3)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box3.from_bounds((5, 5, 5), (6, 6, 6))) == 0.0


def test_box_iou_matches_voxel_count():
    a = Box3.from_bounds((0, 0, 0), (1.0, 0.5, 0.5))
    b = Box3.from_bounds((0.25, 0.25, 0), (1.25, 0.75, 0.5))
    assert box_iou(a, b) == pytest.approx(voxel_iou(a, b, 0.05), abs=1e-9)


@given(boxes(), boxes())
def test_box_iou_symmetric_and_bounded(a, b):
    v = box_iou(a, b)
    assert v == pytest.approx(box_iou(b, a), abs=1e-12)
    assert 0.0 <= v <= 1.0


@given(boxes())
def test_box_self_iou_is_one(a):
    assert box_iou(a, a) == 1.0


@given(st.frozensets(st.integers(0, 30)), st.frozensets(st.integers(0, 30)))
def test_mask_iou_properties(a, b):
    v = mask_iou(a, b)
    assert v == mask_iou(b, a)
    assert 0.0 <= v <= 1.0
    if v == 1.0:
        assert a == b


def test_mask_iou_both_empty_is_zero():
    assert mask_iou(set(), set()) == 0.0


def test_scene_validation():
    cloud = PointCloud(np.zeros((4, 3)))
    with pytest.raises(SceneValidationError):
        Scene("s", cloud, (InstanceAnnotation(1, "a", {0}), InstanceAnnotation(1, "b", {1})))
    with pytest.raises(SceneValidationError):
        Scene("s", cloud, (InstanceAnnotation(1, "a", {0, 1}), InstanceAnnotation(2, "b", {1})))
    with pytest.raises(SceneValidationError):
        Scene("s", cloud, (InstanceAnnotation(1, "a", {7}),))
    with pytest.raises(SceneValidationError):
        Scene("s", cloud, (InstanceAnnotation(1, "a", set()),))


def test_scene_json_round_trip(tmp_path):
    scene = make_scene("rt", 3)
    text = dumps_scene(scene)
    again = loads_scene(text)
    assert dumps_scene(again) == text
    save_scene(scene, tmp_path / "rt.json")
    (loaded,) = load_scenes(tmp_path)
    assert scene_to_dict(loaded) == scene_to_dict(scene)


def test_parse_error_reports_byte_offset():
    with pytest.raises(SceneParseError) as err:
        loads_scene('{"scene_id": "é", "points": [1, }')
    assert err.value.offset == len('{"scene_id": "é", "points": [1, '.encode("utf-8"))


def test_bad_instance_reports_id():
    doc = {"scene_id": "s", "points": [[0, 0, 0]], "instances": [{"id": 4, "label": "a", "point_indices": [0, 0]}]}
    with pytest.raises(SceneValidationError) as err:
        loads_scene(json.dumps(doc))
    assert err.value.instance_id == 4


def test_synthetic_boxes_are_exact():
    scene = make_scene("syn", 11, n_furniture=6)
    for inst in scene.instances:
        b = scene.instance_box(inst.id)
        assert b.volume > 0
