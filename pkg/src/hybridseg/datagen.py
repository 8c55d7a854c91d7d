"""Deterministic synthetic indoor scenes with per-point labels.

Rooms are boxes with a floor, four walls, and a ceiling; furniture is
sampled from labeled primitives (boxes and cylinders) placed without
footprint overlap. Features are class-indexed base colors plus Gaussian
noise, so segmentation is learnable from appearance but not from a single
channel alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, InputError
from .pointcloud import PointCloud

CLASS_NAMES = ("floor", "wall", "ceiling", "table", "chair", "cabinet", "lamp", "clutter")

FLOOR, WALL, CEILING, TABLE, CHAIR, CABINET, LAMP, CLUTTER = range(8)

BASE_COLORS = np.array(
    [
        [0.45, 0.30, 0.20],  # floor
        [0.85, 0.85, 0.75],  # wall
        [0.95, 0.95, 0.95],  # ceiling
        [0.60, 0.40, 0.15],  # table
        [0.20, 0.30, 0.70],  # chair
        [0.55, 0.55, 0.60],  # cabinet
        [0.95, 0.85, 0.30],  # lamp
        [0.70, 0.20, 0.25],  # clutter
    ]
)


@dataclass
class SceneSpec:
    seed: int = 0
    room_extents: tuple[float, float, float] = (6.0, 6.0, 3.0)
    object_count: tuple[int, int] = (5, 9)
    num_points: int = 4096
    feature_noise: float = 0.05
    position_jitter: float = 0.005
    max_place_tries: int = 200

    def __post_init__(self):
        if min(self.room_extents) <= 0:
            raise InputError(f"room extents must be positive, got {self.room_extents}")
        if self.object_count[0] > self.object_count[1] or self.object_count[0] < 0:
            raise InputError(f"bad object count range {self.object_count}")
        if self.num_points < 8:
            raise InputError("need at least 8 points per scene")

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)


# --------------------------------------------------------------------------
# Primitive surfaces
# --------------------------------------------------------------------------


class _Box:
    """Axis-aligned box; points sampled on its outer surface."""

    def __init__(self, lo, hi, label):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.label = label
        d = self.hi - self.lo
        self.face_areas = np.array(
            [d[1] * d[2], d[1] * d[2], d[0] * d[2], d[0] * d[2], d[0] * d[1], d[0] * d[1]]
        )

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def sample(self, rng, n):
        pts = np.empty((n, 3))
        faces = rng.choice(6, size=n, p=self.face_areas / self.face_areas.sum())
        u = rng.uniform(size=(n, 2))
        for i, f in enumerate(faces):
            axis = f // 2  # 0:x 1:y 2:z
            side = f % 2
            p = np.empty(3)
            others = [a for a in range(3) if a != axis]
            p[axis] = self.lo[axis] if side == 0 else self.hi[axis]
            p[others[0]] = self.lo[others[0]] + u[i, 0] * (self.hi[others[0]] - self.lo[others[0]])
            p[others[1]] = self.lo[others[1]] + u[i, 1] * (self.hi[others[1]] - self.lo[others[1]])
            pts[i] = p
        return pts


class _Rect:
    """Axis-aligned planar rectangle."""

    def __init__(self, origin, edge_u, edge_v, label):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.edge_u = np.asarray(edge_u, dtype=np.float64)
        self.edge_v = np.asarray(edge_v, dtype=np.float64)
        self.label = label

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def sample(self, rng, n):
        u = rng.uniform(size=(n, 1))
        v = rng.uniform(size=(n, 1))
        return self.origin + u * self.edge_u + v * self.edge_v


class _Cylinder:
    """Vertical cylinder side plus top disk."""

    def __init__(self, center, radius, z0, z1, label):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.z0, self.z1 = float(z0), float(z1)
        self.label = label

    @property
    def area(self) -> float:
        side = 2.0 * math.pi * self.radius * (self.z1 - self.z0)
        return side + math.pi * self.radius**2

    def sample(self, rng, n):
        side_area = 2.0 * math.pi * self.radius * (self.z1 - self.z0)
        on_side = rng.uniform(size=n) < side_area / self.area
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        pts = np.empty((n, 3))
        r = np.where(on_side, self.radius, self.radius * np.sqrt(rng.uniform(size=n)))
        pts[:, 0] = self.center[0] + r * np.cos(theta)
        pts[:, 1] = self.center[1] + r * np.sin(theta)
        pts[:, 2] = np.where(
            on_side, rng.uniform(self.z0, self.z1, size=n), np.full(n, self.z1)
        )
        return pts


# --------------------------------------------------------------------------
# Scene assembly
# --------------------------------------------------------------------------


def _room_surfaces(lx, ly, h):
    return [
        _Rect([0, 0, 0], [lx, 0, 0], [0, ly, 0], FLOOR),
        _Rect([0, 0, h], [lx, 0, 0], [0, ly, 0], CEILING),
        _Rect([0, 0, 0], [lx, 0, 0], [0, 0, h], WALL),
        _Rect([0, ly, 0], [lx, 0, 0], [0, 0, h], WALL),
        _Rect([0, 0, 0], [0, ly, 0], [0, 0, h], WALL),
        _Rect([lx, 0, 0], [0, ly, 0], [0, 0, h], WALL),
    ]


def _make_object(kind, rng, x, y):
    """Build the surfaces of one furniture instance footed at (x, y)."""
    if kind == TABLE:
        w, d = rng.uniform(0.8, 1.6), rng.uniform(0.6, 1.2)
        h = rng.uniform(0.65, 0.78)
        top = _Box([x, y, h - 0.04], [x + w, y + d, h], TABLE)
        legs = [
            _Box([lx0, ly0, 0.0], [lx0 + 0.06, ly0 + 0.06, h - 0.04], TABLE)
            for lx0, ly0 in ((x, y), (x + w - 0.06, y), (x, y + d - 0.06), (x + w - 0.06, y + d - 0.06))
        ]
        return [top, *legs], (w, d)
    if kind == CHAIR:
        w = rng.uniform(0.38, 0.5)
        seat_h = rng.uniform(0.4, 0.5)
        seat = _Box([x, y, seat_h - 0.05], [x + w, y + w, seat_h], CHAIR)
        back = _Box([x, y, seat_h], [x + w, y + 0.05, seat_h + rng.uniform(0.35, 0.5)], CHAIR)
        return [seat, back], (w, w)
    if kind == CABINET:
        w, d = rng.uniform(0.5, 1.0), rng.uniform(0.35, 0.5)
        h = rng.uniform(1.2, 2.0)
        return [_Box([x, y, 0.0], [x + w, y + d, h], CABINET)], (w, d)
    if kind == LAMP:
        r = rng.uniform(0.12, 0.2)
        h = rng.uniform(1.2, 1.8)
        pole = _Cylinder([x + r, y + r], 0.03, 0.0, h - 0.3, LAMP)
        shade = _Cylinder([x + r, y + r], r, h - 0.3, h, LAMP)
        return [pole, shade], (2 * r, 2 * r)
    w, d = rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35)
    h = rng.uniform(0.1, 0.4)
    return [_Box([x, y, 0.0], [x + w, y + d, h], CLUTTER)], (w, d)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample one labeled scene; bit-identical for a fixed spec."""
    rng = np.random.default_rng(spec.seed)
    lx, ly, h = spec.room_extents
    surfaces = _room_surfaces(lx, ly, h)

    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    kinds = [TABLE, CHAIR, CABINET, LAMP, CLUTTER]
    order = [kinds[i % len(kinds)] for i in range(count)]
    footprints: list[tuple[float, float, float, float]] = []
    object_surfaces = []
    for kind in order:
        placed = False
        for _ in range(spec.max_place_tries):
            x = rng.uniform(0.2, max(lx - 1.8, 0.21))
            y = rng.uniform(0.2, max(ly - 1.8, 0.21))
            surf, (w, d) = _make_object(kind, rng, x, y)
            if x + w > lx - 0.05 or y + d > ly - 0.05:
                continue
            box = (x, y, x + w, y + d)
            if any(not (box[2] < o[0] or o[2] < box[0] or box[3] < o[1] or o[3] < box[1]) for o in footprints):
                continue
            footprints.append(box)
            object_surfaces.extend(surf)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place a {CLASS_NAMES[kind]} after {spec.max_place_tries} tries "
                f"(room {spec.room_extents}, {len(footprints)} objects placed)"
            )

    # fixed budget split: structure 55%, objects 45% by surface area
    struct_share = 0.55 if object_surfaces else 1.0
    struct_areas = np.array([s.area for s in surfaces])
    budgets = struct_share * spec.num_points * struct_areas / struct_areas.sum()
    all_surfaces = list(surfaces)
    if object_surfaces:
        obj_areas = np.array([s.area for s in object_surfaces])
        obj_budgets = (1.0 - struct_share) * spec.num_points * obj_areas / obj_areas.sum()
        budgets = np.concatenate([budgets, obj_budgets])
        all_surfaces.extend(object_surfaces)

    counts = np.floor(budgets).astype(int)
    remainder = spec.num_points - counts.sum()
    frac_order = np.argsort(-(budgets - counts))
    counts[frac_order[:remainder]] += 1

    positions, labels = [], []
    for surf, n in zip(all_surfaces, counts):
        if n <= 0:
            continue
        positions.append(surf.sample(rng, int(n)))
        labels.append(np.full(int(n), surf.label, dtype=np.int64))
    positions = np.concatenate(positions)
    labels = np.concatenate(labels)
    positions += rng.normal(0.0, spec.position_jitter, size=positions.shape)

    features = BASE_COLORS[labels] + rng.normal(0.0, spec.feature_noise, size=(len(labels), 3))
    features = np.clip(features, 0.0, 1.0)
    return PointCloud(positions, features, labels)
