"""Analytic signed-distance shapes and the procedural shape generator.

A :class:`ShapeSpec` is a small CSG tree over spheres, axis-aligned boxes and
z-axis tori.  Primitive distances are exact; CSG nodes combine children with
min / max, which bounds (but does not equal) the true distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = ("sphere", "box", "torus")
OPERATIONS = ("union", "intersection", "subtraction")
CATEGORIES = ("sphere", "box", "torus", "mixed")
MAX_DEPTH = 4
# Generated shapes stay inside this half-width so meshes close inside [-1, 1]^3.
CONTAINMENT = 0.9


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    half_extents: tuple = (0.0, 0.0, 0.0)
    major_radius: float = 0.0
    minor_radius: float = 0.0
    children: tuple = field(default=())

    def __post_init__(self):
        if self.kind in OPERATIONS:
            if len(self.children) != 2:
                raise ValueError(f"{self.kind} node needs exactly two children")
        elif self.kind not in PRIMITIVES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.depth() > MAX_DEPTH:
            raise ValueError(f"CSG tree deeper than {MAX_DEPTH}")
        if self.kind in PRIMITIVES:
            sizes = {"sphere": (self.radius,), "box": tuple(self.half_extents),
                     "torus": (self.major_radius, self.minor_radius)}[self.kind]
            if min(sizes) <= 0:
                raise ValueError(f"{self.kind} sizes must be positive")
            lo, hi = self.bounds()
            if lo.min() < -1.0 or hi.max() > 1.0:
                raise ValueError(f"{self.kind} leaves the unit cube")

    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(c.depth() for c in self.children)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box enclosing the solid (conservative for CSG)."""
        c = np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            r = np.full(3, self.radius)
            return c - r, c + r
        if self.kind == "box":
            h = np.asarray(self.half_extents, dtype=float)
            return c - h, c + h
        if self.kind == "torus":
            e = self.major_radius + self.minor_radius
            h = np.array([e, e, self.minor_radius])
            return c - h, c + h
        (lo_a, hi_a), (lo_b, hi_b) = (ch.bounds() for ch in self.children)
        if self.kind == "union":
            return np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
        if self.kind == "intersection":
            return np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
        return lo_a, hi_a

    def to_dict(self) -> dict:
        if self.kind in OPERATIONS:
            return {"kind": self.kind, "children": [c.to_dict() for c in self.children]}
        out = {"kind": self.kind, "center": [float(v) for v in self.center]}
        if self.kind == "sphere":
            out["radius"] = float(self.radius)
        elif self.kind == "box":
            out["half_extents"] = [float(v) for v in self.half_extents]
        else:
            out["major_radius"] = float(self.major_radius)
            out["minor_radius"] = float(self.minor_radius)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        kind = d["kind"]
        if kind in OPERATIONS:
            return cls(kind=kind, children=tuple(cls.from_dict(c) for c in d["children"]))
        center = tuple(float(v) for v in d.get("center", (0.0, 0.0, 0.0)))
        if kind == "sphere":
            return cls(kind, center, radius=float(d["radius"]))
        if kind == "box":
            return cls(kind, center, half_extents=tuple(float(v) for v in d["half_extents"]))
        if kind == "torus":
            return cls(kind, center, major_radius=float(d["major_radius"]),
                       minor_radius=float(d["minor_radius"]))
        raise ValueError(f"unknown shape kind {kind!r}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ShapeSpec":
        return cls.from_dict(json.loads(text))


def sphere(center, radius) -> ShapeSpec:
    return ShapeSpec("sphere", tuple(map(float, center)), radius=float(radius))


def box(center, half_extents) -> ShapeSpec:
    return ShapeSpec("box", tuple(map(float, center)), half_extents=tuple(map(float, half_extents)))


def torus(center, major_radius, minor_radius) -> ShapeSpec:
    return ShapeSpec("torus", tuple(map(float, center)), major_radius=float(major_radius),
                     minor_radius=float(minor_radius))


def union(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec:
    return ShapeSpec("union", children=(a, b))


def intersection(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec:
    return ShapeSpec("intersection", children=(a, b))


def subtraction(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec:
    return ShapeSpec("subtraction", children=(a, b))


def sdf_eval(spec: ShapeSpec, x) -> np.ndarray | float:
    """Signed distance of ``spec`` at ``x`` (a 3-vector or an ``(..., 3)`` array)."""
    pts = np.asarray(x, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have a trailing axis of 3, got {pts.shape}")
    out = _sdf(spec, pts)
    return float(out) if pts.ndim == 1 else out


def _sdf(spec: ShapeSpec, p: np.ndarray) -> np.ndarray:
    kind = spec.kind
    if kind in OPERATIONS:
        a = _sdf(spec.children[0], p)
        b = _sdf(spec.children[1], p)
        if kind == "union":
            return np.minimum(a, b)
        if kind == "intersection":
            return np.maximum(a, b)
        return np.maximum(a, -b)
    q = p - np.asarray(spec.center)
    if kind == "sphere":
        return np.linalg.norm(q, axis=-1) - spec.radius
    if kind == "box":
        d = np.abs(q) - np.asarray(spec.half_extents)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside
    ring = np.hypot(q[..., 0], q[..., 1]) - spec.major_radius
    return np.hypot(ring, q[..., 2]) - spec.minor_radius


def sdf_gradient(spec: ShapeSpec, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the signed distance, shape ``(..., 3)``."""
    pts = np.asarray(x, dtype=np.float64)
    grad = np.empty(pts.shape)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[..., axis] = (_sdf(spec, pts + step) - _sdf(spec, pts - step)) / (2.0 * h)
    return grad


# -- procedural dataset --------------------------------------------------------

def _place(rng: np.random.Generator, extent: np.ndarray) -> tuple:
    slack = np.maximum(CONTAINMENT - extent, 0.0)
    return tuple(rng.uniform(-slack, slack))


def random_primitive(kind: str, rng: np.random.Generator) -> ShapeSpec:
    """One primitive with parameters drawn from the generator's ranges."""
    if kind == "sphere":
        r = rng.uniform(0.2, 0.7)
        return sphere(_place(rng, np.full(3, r)), r)
    if kind == "box":
        h = rng.uniform(0.15, 0.6, size=3)
        return box(_place(rng, h), h)
    if kind == "torus":
        big = rng.uniform(0.25, 0.5)
        small = rng.uniform(0.05, 0.2)
        e = big + small
        return torus(_place(rng, np.array([e, e, small])), big, small)
    raise ValueError(f"unknown primitive {kind!r}")


def random_shape(category: str, rng: np.random.Generator) -> ShapeSpec:
    """Draw a shape of ``category`` (a primitive kind, or ``"mixed"`` for a two-primitive union)."""
    if category in PRIMITIVES:
        return random_primitive(category, rng)
    if category != "mixed":
        raise ValueError(f"unknown category {category!r}")
    while True:
        a = random_primitive(PRIMITIVES[rng.integers(3)], rng)
        b = random_primitive(PRIMITIVES[rng.integers(3)], rng)
        shape = union(a, b)
        lo, hi = shape.bounds()
        if np.all(lo >= -CONTAINMENT - 1e-12) and np.all(hi <= CONTAINMENT + 1e-12):
            return shape


def make_shape_set(n: int, rng: np.random.Generator) -> list[tuple[str, ShapeSpec]]:
    """``n`` shapes cycling through the four categories in order."""
    return [(CATEGORIES[i % len(CATEGORIES)], random_shape(CATEGORIES[i % len(CATEGORIES)], rng))
            for i in range(n)]
