"""Parametric 3D primitives sampled as surface point clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("box", "sphere", "cylinder", "cone", "torus", "pyramid", "capsule", "ellipsoid")

BOX_HALF = 0.8
SPHERE_RADIUS = 1.0
ELLIPSOID_AXES = (1.0, 0.7, 0.35)
SCALE_RANGE = (0.6, 1.0)


@dataclass(frozen=True)
class ShapeInstance:
    class_id: int
    class_name: str
    surface_points: np.ndarray  # (P, 3)
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray  # per-axis scale applied before rotation
    seed: int


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _choose(rng, n, areas):
    p = np.asarray(areas, dtype=float)
    return rng.choice(len(p), size=n, p=p / p.sum())


def _triangles(rng, n, tris):
    """Uniform samples on a union of triangles ``tris`` (T, 3, 3)."""
    tris = np.asarray(tris, dtype=float)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = _choose(rng, n, areas)
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    a, b, c = tris[which, 0], tris[which, 1], tris[which, 2]
    return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


def _box(rng, n):
    h = BOX_HALF
    axis = rng.integers(0, 3, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts = rng.uniform(-h, h, size=(n, 3))
    pts[np.arange(n), axis] = sign * h
    return pts


def _sphere(rng, n):
    return SPHERE_RADIUS * _unit_vectors(rng, n)


def _ellipsoid(rng, n):
    return _unit_vectors(rng, n) * np.asarray(ELLIPSOID_AXES)


def _disc(rng, n, r):
    rad = r * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * math.pi, n)
    return rad * np.cos(t), rad * np.sin(t)


def _cylinder(rng, n, r=0.8, half=0.45):
    part = _choose(rng, n, [2 * math.pi * r * 2 * half, math.pi * r * r, math.pi * r * r])
    pts = np.empty((n, 3))
    t = rng.uniform(0, 2 * math.pi, n)
    side = part == 0
    pts[side] = np.stack([r * np.cos(t[side]), r * np.sin(t[side]), rng.uniform(-half, half, side.sum())], 1)
    for k, z in ((1, half), (2, -half)):
        m = part == k
        x, y = _disc(rng, m.sum(), r)
        pts[m] = np.stack([x, y, np.full(m.sum(), z)], 1)
    return pts


def _cone(rng, n, r=0.5, height=2.0):
    slant = math.hypot(r, height)
    part = _choose(rng, n, [math.pi * r * slant, math.pi * r * r])
    pts = np.empty((n, 3))
    lat = part == 0
    s = np.sqrt(rng.random(lat.sum()))  # fraction of the way from apex to rim
    t = rng.uniform(0, 2 * math.pi, lat.sum())
    pts[lat] = np.stack([s * r * np.cos(t), s * r * np.sin(t), height / 2 - s * height], 1)
    base = ~lat
    x, y = _disc(rng, base.sum(), r)
    pts[base] = np.stack([x, y, np.full(base.sum(), -height / 2)], 1)
    return pts


def _torus(rng, n, R=0.75, r=0.3):
    out = []
    got = 0
    while got < n:
        m = 2 * (n - got) + 16
        th = rng.uniform(0, 2 * math.pi, m)
        ph = rng.uniform(0, 2 * math.pi, m)
        keep = rng.random(m) < (R + r * np.cos(ph)) / (R + r)
        th, ph = th[keep], ph[keep]
        ring = R + r * np.cos(ph)
        out.append(np.stack([ring * np.cos(th), ring * np.sin(th), r * np.sin(ph)], 1))
        got += len(th)
    return np.concatenate(out)[:n]


def _pyramid(rng, n, h=1.0, zb=-0.6, apex=0.6):
    c = [(-h, -h, zb), (h, -h, zb), (h, h, zb), (-h, h, zb)]
    top = (0.0, 0.0, apex)
    tris = [(c[i], c[(i + 1) % 4], top) for i in range(4)]
    tris += [(c[0], c[1], c[2]), (c[0], c[2], c[3])]
    return _triangles(rng, n, tris)


def _capsule(rng, n, r=0.35, half=0.75):
    part = _choose(rng, n, [2 * math.pi * r * 2 * half, 4 * math.pi * r * r])
    pts = np.empty((n, 3))
    side = part == 0
    t = rng.uniform(0, 2 * math.pi, side.sum())
    pts[side] = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-half, half, side.sum())], 1)
    caps = ~side
    u = r * _unit_vectors(rng, caps.sum())
    u[:, 2] += np.where(u[:, 2] >= 0, half, -half)
    pts[caps] = u
    return pts


# Proportions keep each class recognisable under the per-axis scale range:
# drum-like cylinder vs long capsule, narrow cone vs squat pyramid.
_SAMPLERS = {
    "box": _box, "sphere": _sphere, "cylinder": _cylinder, "cone": _cone,
    "torus": _torus, "pyramid": _pyramid, "capsule": _capsule, "ellipsoid": _ellipsoid,
}


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_shape(class_id: int, seed: int, points: int = 2048, random_pose: bool = True,
                 normalize: bool = True) -> ShapeInstance:
    """Sample a primitive's surface deterministically from ``(class_id, seed)``.

    With ``random_pose`` the object gets a uniform random rotation and a
    per-axis scale in [0.6, 1.0]; with ``normalize`` it is recentred on its
    bounding-box midpoint and rescaled so the farthest point has norm 1.
    """
    if not 0 <= class_id < len(CLASS_NAMES):
        raise ValueError(f"unknown class id {class_id}")
    if points < 256:
        raise ValueError(f"point budget must be at least 256, got {points}")
    name = CLASS_NAMES[class_id]
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[name](rng, points)
    if random_pose:
        q = random_quaternion(rng)
        scale = rng.uniform(*SCALE_RANGE, size=3)
        pts = (pts * scale) @ quaternion_to_matrix(q).T
    else:
        q, scale = np.array([1.0, 0.0, 0.0, 0.0]), np.ones(3)
    if normalize:
        pts = pts - 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        pts = pts / np.linalg.norm(pts, axis=1).max()
    return ShapeInstance(class_id, name, pts, q, scale, int(seed))
