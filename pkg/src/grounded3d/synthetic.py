"""Procedural indoor scenes for tests, demos and the end-to-end run.

Furniture stands on the floor on a coarse grid; some surfaces carry small
objects resting exactly on their top face. Each instance is sampled as the
8 corners of its box plus random interior points, so the box recovered from
the mask is the box that was placed.
"""

from __future__ import annotations

import numpy as np

from .scene import InstanceAnnotation, PointCloud, Scene

ROOM = 6.0
CELL = 1.5

# label -> (x size, y size, height, rgb)
FURNITURE = {
    "table": (1.2, 0.8, 0.75, (0.55, 0.35, 0.2)),
    "desk": (1.0, 0.6, 0.72, (0.8, 0.8, 0.78)),
    "chair": (0.5, 0.5, 0.9, (0.1, 0.1, 0.1)),
    "sofa": (1.4, 0.8, 0.8, (0.2, 0.3, 0.6)),
    "cabinet": (0.8, 0.5, 1.1, (0.6, 0.6, 0.6)),
    "nightstand": (0.45, 0.4, 0.55, (0.95, 0.95, 0.92)),
    "bed": (1.4, 1.4, 0.5, (0.7, 0.2, 0.2)),
    "trash can": (0.3, 0.3, 0.4, (0.15, 0.5, 0.2)),
}
SURFACES = ("table", "desk", "nightstand", "cabinet")
SMALL = {
    "cup": (0.08, 0.08, 0.1, (0.9, 0.9, 0.9)),
    "book": (0.2, 0.15, 0.04, (0.8, 0.1, 0.1)),
    "lamp": (0.2, 0.2, 0.4, (0.95, 0.85, 0.2)),
    "laptop": (0.35, 0.25, 0.03, (0.3, 0.3, 0.3)),
    "plant": (0.2, 0.2, 0.35, (0.1, 0.6, 0.1)),
}
# labels that never appear, for "no objects" detection prompts
ABSENT_LABELS = ("piano", "bathtub", "refrigerator", "television", "bicycle")


def _box_points(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n_interior: int) -> np.ndarray:
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    inner = lo + rng.random((n_interior, 3)) * (hi - lo)
    return np.vstack([corners, inner])


def make_scene(scene_id: str, seed: int, n_furniture: int = 5, points_per_object: int = 24) -> Scene:
    rng = np.random.default_rng(seed)
    cells = [(i, j) for i in range(int(ROOM / CELL)) for j in range(int(ROOM / CELL))]
    chosen = rng.choice(len(cells), size=min(n_furniture, len(cells)), replace=False)
    labels = sorted(FURNITURE)
    chunks, colors, instances = [], [], []
    next_point = 0
    next_id = 1

    def add(label: str, lo: np.ndarray, hi: np.ndarray, rgb) -> None:
        nonlocal next_point, next_id
        lo = np.round(lo, 4)
        hi = np.round(hi, 4)
        pts = np.round(_box_points(rng, lo, hi, points_per_object), 4)
        chunks.append(pts)
        colors.append(np.clip(np.asarray(rgb) + rng.normal(0, 0.02, (len(pts), 3)), 0, 1).round(4))
        mask = frozenset(range(next_point, next_point + len(pts)))
        instances.append(InstanceAnnotation(next_id, label, mask))
        next_point += len(pts)
        next_id += 1

    for k in sorted(int(c) for c in chosen):
        ci, cj = cells[k]
        label = labels[int(rng.integers(len(labels)))]
        sx, sy, h, rgb = FURNITURE[label]
        cx = ci * CELL + CELL / 2 + rng.uniform(-0.15, 0.15)
        cy = cj * CELL + CELL / 2 + rng.uniform(-0.15, 0.15)
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, h])
        add(label, lo, hi, rgb)
        if label in SURFACES:
            for _ in range(int(rng.integers(0, 3))):
                small = sorted(SMALL)[int(rng.integers(len(SMALL)))]
                ox, oy, oh, srgb = SMALL[small]
                px = rng.uniform(lo[0] + ox / 2, hi[0] - ox / 2)
                py = rng.uniform(lo[1] + oy / 2, hi[1] - oy / 2)
                slo = np.array([px - ox / 2, py - oy / 2, h])
                shi = np.array([px + ox / 2, py + oy / 2, h + oh])
                add(small, slo, shi, srgb)

    points = np.vstack(chunks) if chunks else np.zeros((0, 3))
    cols = np.vstack(colors) if colors else np.zeros((0, 3))
    return Scene(scene_id, PointCloud(points, cols), tuple(instances))


def make_scenes(n: int, seed: int, prefix: str = "synth") -> list[Scene]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31, size=n)
    sizes = rng.integers(3, 8, size=n)
    return [make_scene(f"{prefix}{k:04d}", int(s), int(m)) for k, (s, m) in enumerate(zip(seeds, sizes))]
