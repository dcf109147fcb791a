"""Analytic constant-density solids for synthetic scenes and test oracles.

Each primitive evaluates a density (extinction coefficient) over batches of
points, exposes an exact signed distance to its surface, and optionally
carries a constant emission color. Trees are built from unions and
rigidly-posed instances and serialize to/from plain dicts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform
from .validation import check_points, check_vector3


def _as_color(color):
    if color is None:
        return None
    return check_vector3(color, "color")


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    density: float = 10.0
    color: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", check_vector3(self.center, "center"))
        object.__setattr__(self, "color", _as_color(self.color))

    def density_at(self, points: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(points - self.center, axis=1)
        return np.where(d <= self.radius, self.density, 0.0)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=1) - self.radius

    def color_at(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros((len(points), 3))
        if self.color is not None:
            out[self.density_at(points) > 0] = self.color
        return out

    def to_dict(self) -> dict:
        return {
            "type": "sphere",
            "center": self.center.tolist(),
            "radius": self.radius,
            "density": self.density,
            "color": None if self.color is None else self.color.tolist(),
        }


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; pose it with Posed for arbitrary orientation."""

    center: np.ndarray
    half_extents: np.ndarray
    density: float = 10.0
    color: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", check_vector3(self.center, "center"))
        object.__setattr__(self, "half_extents", check_vector3(self.half_extents, "half_extents"))
        object.__setattr__(self, "color", _as_color(self.color))

    def density_at(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - self.center) - self.half_extents
        inside = np.all(q <= 0.0, axis=1)
        return np.where(inside, self.density, 0.0)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def color_at(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros((len(points), 3))
        if self.color is not None:
            out[self.density_at(points) > 0] = self.color
        return out

    def to_dict(self) -> dict:
        return {
            "type": "box",
            "center": self.center.tolist(),
            "half_extents": self.half_extents.tolist(),
            "density": self.density,
            "color": None if self.color is None else self.color.tolist(),
        }


@dataclass(frozen=True)
class Capsule:
    point_a: np.ndarray
    point_b: np.ndarray
    radius: float
    density: float = 10.0
    color: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "point_a", check_vector3(self.point_a, "point_a"))
        object.__setattr__(self, "point_b", check_vector3(self.point_b, "point_b"))
        object.__setattr__(self, "color", _as_color(self.color))

    def _segment_distance(self, points: np.ndarray) -> np.ndarray:
        ab = self.point_b - self.point_a
        denom = float(np.dot(ab, ab))
        if denom < 1e-18:
            return np.linalg.norm(points - self.point_a, axis=1)
        t = np.clip((points - self.point_a) @ ab / denom, 0.0, 1.0)
        closest = self.point_a + t[:, None] * ab
        return np.linalg.norm(points - closest, axis=1)

    def density_at(self, points: np.ndarray) -> np.ndarray:
        return np.where(self._segment_distance(points) <= self.radius, self.density, 0.0)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return self._segment_distance(points) - self.radius

    def color_at(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros((len(points), 3))
        if self.color is not None:
            out[self.density_at(points) > 0] = self.color
        return out

    def to_dict(self) -> dict:
        return {
            "type": "capsule",
            "point_a": self.point_a.tolist(),
            "point_b": self.point_b.tolist(),
            "radius": self.radius,
            "density": self.density,
            "color": None if self.color is None else self.color.tolist(),
        }


@dataclass(frozen=True)
class Union:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ValueError("union needs at least one child")

    def density_at(self, points: np.ndarray) -> np.ndarray:
        return np.max([c.density_at(points) for c in self.children], axis=0)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.min([c.signed_distance(points) for c in self.children], axis=0)

    def color_at(self, points: np.ndarray) -> np.ndarray:
        densities = np.stack([c.density_at(points) for c in self.children])
        colors = np.stack([c.color_at(points) for c in self.children])
        pick = np.argmax(densities, axis=0)
        return colors[pick, np.arange(len(points))]

    def to_dict(self) -> dict:
        return {"type": "union", "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class Posed:
    """A child primitive rigidly moved by ``transform``."""

    child: object
    transform: RigidTransform

    def _local(self, points: np.ndarray) -> np.ndarray:
        return self.transform.inverse().apply(points)

    def density_at(self, points: np.ndarray) -> np.ndarray:
        return self.child.density_at(self._local(points))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        # rigid motions preserve distances
        return self.child.signed_distance(self._local(points))

    def color_at(self, points: np.ndarray) -> np.ndarray:
        return self.child.color_at(self._local(points))

    def to_dict(self) -> dict:
        return {
            "type": "posed",
            "transform": self.transform.matrix().tolist(),
            "child": self.child.to_dict(),
        }


def primitive_from_dict(data: dict):
    """Rebuild a primitive tree from its dict form."""
    kind = data.get("type")
    if kind == "sphere":
        return Sphere(data["center"], float(data["radius"]), float(data.get("density", 10.0)), data.get("color"))
    if kind == "box":
        return Box(data["center"], data["half_extents"], float(data.get("density", 10.0)), data.get("color"))
    if kind == "capsule":
        return Capsule(
            data["point_a"], data["point_b"], float(data["radius"]), float(data.get("density", 10.0)), data.get("color")
        )
    if kind == "union":
        return Union(tuple(primitive_from_dict(c) for c in data["children"]))
    if kind == "posed":
        return Posed(primitive_from_dict(data["child"]), RigidTransform.from_matrix(np.asarray(data["transform"])))
    raise ValueError(f"unknown primitive type: {kind!r}")


def has_color(primitive) -> bool:
    if isinstance(primitive, Union):
        return any(has_color(c) for c in primitive.children)
    if isinstance(primitive, Posed):
        return has_color(primitive.child)
    return getattr(primitive, "color", None) is not None


def surface_distance(primitive, points) -> np.ndarray:
    """Unsigned distance from points to the primitive's surface."""
    return np.abs(primitive.signed_distance(check_points(points, "points")))
