import numpy as np
import pytest
from hypothesis import settings

from grounded3d.scene import InstanceAnnotation, PointCloud, Scene

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def box_scene(boxes: dict, scene_id: str = "s0") -> Scene:
    """Scene whose instances are the 8 corners of the given boxes.

    ``boxes`` maps id -> (label, lo, hi).
    """
    pts, instances = [], []
    for inst_id, (label, lo, hi) in sorted(boxes.items()):
        start = len(pts)
        for x in (lo[0], hi[0]):
            for y in (lo[1], hi[1]):
                for z in (lo[2], hi[2]):
                    pts.append((x, y, z))
        instances.append(InstanceAnnotation(inst_id, label, frozenset(range(start, len(pts)))))
    return Scene(scene_id, PointCloud(np.array(pts, dtype=float)), tuple(instances))


@pytest.fixture
def room():
    return box_scene({
        1: ("table", (0, 0, 0), (1.2, 0.8, 0.75)),
        2: ("cup", (0.5, 0.3, 0.75), (0.6, 0.4, 0.85)),
        3: ("chair", (1.5, 0, 0), (2.0, 0.5, 0.9)),
        4: ("chair", (4.0, 0, 0), (4.5, 0.5, 0.9)),
        5: ("lamp", (0.1, 0.1, 2.0), (0.3, 0.3, 2.2)),
    }, "room")
