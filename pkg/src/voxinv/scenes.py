"""Synthetic LiDAR-like scenes: a ground plane, boxes, and poles.

Surfaces are sampled with a point density that falls off as ``1/r^2`` from
the sensor, and only faces turned toward the sensor receive points. This
reproduces the property that matters downstream: nearly every occupied voxel
holds a single point, with multi-point voxels clustered near the sensor.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .voxelgrid import as_cloud


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    lower: tuple = (0.0, -8.0, -3.0)
    upper: tuple = (16.0, 8.0, 1.0)
    ground: bool = True
    ground_z: float = -1.73
    n_boxes: int = 4
    n_poles: int = 5
    # points per m^2 at 1 m from the sensor
    density: float = 300.0
    min_range: float = 1.5
    jitter: float = 0.01
    sensor: tuple = (0.0, 0.0, 0.0)
    # keeps geometry below the top slab of the grid
    max_height: float = 2.0

    def __post_init__(self):
        for name in ("lower", "upper", "sensor"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if any(u <= lo for lo, u in zip(self.lower, self.upper)):
            raise ValueError("scene range must have upper > lower on every axis")
        if self.density <= 0 or self.min_range <= 0 or self.jitter < 0:
            raise ValueError("density and min_range must be positive, jitter >= 0")
        if self.n_boxes < 0 or self.n_poles < 0:
            raise ValueError("object counts must be >= 0")

    def to_dict(self):
        return asdict(self)


def _sample_patch(rng, spec, origin, u, v, normal, du, dv):
    """Points on the rectangle ``origin + a*u + b*v`` (a in [0,du], b in [0,dv]).

    Candidates are drawn at the peak density, then thinned by ``(r0/r)^2``.
    """
    sensor = np.array(spec.sensor)
    center = origin + 0.5 * du * u + 0.5 * dv * v
    if np.dot(normal, sensor - center) <= 0:
        return np.zeros((0, 3))
    area = du * dv
    peak = spec.density / spec.min_range ** 2
    n = rng.poisson(area * peak)
    ab = rng.random((n, 2)) * np.array([du, dv])
    pts = origin + ab[:, :1] * u + ab[:, 1:] * v
    r = np.maximum(np.linalg.norm(pts - sensor, axis=1), spec.min_range)
    keep = rng.random(n) < (spec.min_range / r) ** 2
    return pts[keep]


def _box_faces(center, size, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    L, W, H = size
    corner = center - 0.5 * L * ex - 0.5 * W * ey
    faces = [
        (corner, ey, ez, -ex, W, H),
        (corner + L * ex, ey, ez, ex, W, H),
        (corner, ex, ez, -ey, L, H),
        (corner + W * ey, ex, ez, ey, L, H),
        (corner + H * ez, ex, ey, ez, L, W),
    ]
    return faces


def _pole_faces(base, radius, height, n_sides=8):
    faces = []
    ez = np.array([0.0, 0.0, 1.0])
    side = 2 * radius * np.sin(np.pi / n_sides)
    for k in range(n_sides):
        a0 = 2 * np.pi * k / n_sides
        a1 = 2 * np.pi * (k + 1) / n_sides
        p0 = base + radius * np.array([np.cos(a0), np.sin(a0), 0.0])
        p1 = base + radius * np.array([np.cos(a1), np.sin(a1), 0.0])
        u = (p1 - p0) / side
        mid = 0.5 * (a0 + a1)
        faces.append((p0, u, ez, np.array([np.cos(mid), np.sin(mid), 0.0]), side, height))
    return faces


def _place(rng, spec, margin):
    lo, hi = np.array(spec.lower[:2]), np.array(spec.upper[:2])
    margin = np.minimum(margin, 0.25 * (hi - lo))
    lo, hi = lo + margin, hi - margin
    for _ in range(100):
        xy = rng.uniform(lo, hi)
        if np.linalg.norm(xy - np.array(spec.sensor[:2])) > 3.0:
            break
    # ranges too small to keep 3 m of clearance around the sensor take the last draw
    return xy


def generate_scene(spec):
    """``(k, 4)`` float32 cloud of ``(x, y, z, intensity)``; deterministic per ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    groups = []
    gz = spec.ground_z
    if spec.ground:
        lo, hi = spec.lower, spec.upper
        faces = [(np.array([lo[0], lo[1], gz]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                  np.array([0, 0, 1.0]), hi[0] - lo[0], hi[1] - lo[1])]
        groups.append((faces, rng.uniform(0.1, 0.3)))
    for _ in range(spec.n_boxes):
        size = (rng.uniform(3.5, 4.5), rng.uniform(1.6, 2.0), rng.uniform(1.4, min(1.7, spec.max_height)))
        xy = _place(rng, spec, margin=2.5)
        groups.append((_box_faces(np.array([xy[0], xy[1], gz]), size, rng.uniform(0, np.pi)),
                       rng.uniform(0.3, 0.9)))
    for _ in range(spec.n_poles):
        xy = _place(rng, spec, margin=0.5)
        height = rng.uniform(1.0, spec.max_height)
        groups.append((_pole_faces(np.array([xy[0], xy[1], gz]), rng.uniform(0.08, 0.2), height),
                       rng.uniform(0.4, 1.0)))

    clouds = []
    for faces, intensity in groups:
        for origin, u, v, normal, du, dv in faces:
            pts = _sample_patch(rng, spec, origin, u, v, normal, du, dv)
            if len(pts):
                inten = np.clip(intensity + rng.normal(0, 0.05, len(pts)), 0, 1)
                clouds.append(np.column_stack([pts, inten]))
    if not clouds:
        return np.zeros((0, 4), np.float32)
    cloud = np.concatenate(clouds)
    cloud[:, :3] += rng.normal(0, spec.jitter, size=(len(cloud), 3)) if spec.jitter else 0
    cloud = as_cloud(cloud)
    inside = np.all((cloud[:, :3] >= np.array(spec.lower, np.float32))
                    & (cloud[:, :3] < np.array(spec.upper, np.float32)), axis=1)
    return cloud[inside]


def scene_corpus(count, base_seed=0, **overrides):
    """``count`` scenes with seeds ``base_seed, base_seed + 1, ...``."""
    return [generate_scene(SceneSpec(seed=base_seed + i, **overrides)) for i in range(count)]
