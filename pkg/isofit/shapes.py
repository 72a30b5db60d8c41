# isofit/shapes.py
"""Analytic target shapes (signed distance, negative inside) and surface colors."""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError


def _points(p) -> np.ndarray:
    return np.atleast_2d(np.asarray(p, dtype=np.float64))


def ellipsoid_sdf(p, semi_axes, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """
    Bound-based ellipsoid distance k0 * (k0 - 1) / k1 with k0 = |p/r|,
    k1 = |p/r^2|. Exact for spheres.
    """
    r = np.asarray(semi_axes, dtype=np.float64)
    q = _points(p) - np.asarray(center, dtype=np.float64)
    k0 = np.linalg.norm(q / r, axis=1)
    k1 = np.linalg.norm(q / (r * r), axis=1)
    safe = k1 > 1e-12
    return np.where(safe, k0 * (k0 - 1.0) / np.where(safe, k1, 1.0), -float(r.min()))


class ColorFn(ABC):
    @abstractmethod
    def __call__(self, p: np.ndarray) -> np.ndarray:
        """(N, 3) points -> (N, 3) RGB in [0, 1]."""


class TargetShape(ABC):
    color: Optional[ColorFn] = None

    @abstractmethod
    def sdf(self, p) -> np.ndarray:
        ...

    def gradient(self, p, h: float = 1e-6) -> np.ndarray:
        """Central-difference gradient of sdf, (N, 3)."""
        q = _points(p)
        out = np.empty_like(q)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            out[:, axis] = (self.sdf(q + e) - self.sdf(q - e)) / (2.0 * h)
        return out

    def __call__(self, p) -> np.ndarray:
        return self.sdf(p)


# ---- Primitives -------------------------------------------------------------

@dataclass
class Sphere(TargetShape):
    radius: float
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p):
        return np.linalg.norm(_points(p) - np.asarray(self.center), axis=1) - self.radius


@dataclass
class Ellipsoid(TargetShape):
    semi_axes: Tuple[float, float, float]
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p):
        return ellipsoid_sdf(p, self.semi_axes, self.center)

    def contains(self, p) -> np.ndarray:
        q = (_points(p) - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return (q * q).sum(axis=1) < 1.0


@dataclass
class Torus(TargetShape):
    """Ring in the xz-plane around the y axis."""
    major: float
    minor: float
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p):
        q = _points(p) - np.asarray(self.center)
        ring = np.hypot(q[:, 0], q[:, 2]) - self.major
        return np.hypot(ring, q[:, 1]) - self.minor


@dataclass
class Box(TargetShape):
    half_extents: Tuple[float, float, float]
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p):
        q = np.abs(_points(p) - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


@dataclass
class Capsule(TargetShape):
    a: Tuple[float, float, float]
    b: Tuple[float, float, float]
    radius: float

    def sdf(self, p):
        a, b = np.asarray(self.a), np.asarray(self.b)
        pa, ba = _points(p) - a, b - a
        t = np.clip(pa @ ba / float(ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - t[:, None] * ba, axis=1) - self.radius


# ---- Composites (conservative bounds, not exact distances) -----------------

@dataclass
class Union(TargetShape):
    children: Sequence[TargetShape]

    def sdf(self, p):
        return np.min([c.sdf(p) for c in self.children], axis=0)


@dataclass
class Intersection(TargetShape):
    children: Sequence[TargetShape]

    def sdf(self, p):
        return np.max([c.sdf(p) for c in self.children], axis=0)


@dataclass
class Difference(TargetShape):
    base: TargetShape
    cut: TargetShape

    def sdf(self, p):
        return np.maximum(self.base.sdf(p), -self.cut.sdf(p))


# ---- Colors -----------------------------------------------------------------

@dataclass
class ConstantColor(ColorFn):
    value: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __call__(self, p):
        return np.tile(np.asarray(self.value, dtype=np.float64), (len(_points(p)), 1))


@dataclass
class AxisGradientColor(ColorFn):
    """c(p) = (p_x, p_y, p_z) rescaled from the domain box to [0, 1]."""
    bbox: Tuple[float, float] = (-0.5, 0.5)

    def __call__(self, p):
        lo, hi = self.bbox
        return np.clip((_points(p) - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class NormalColor(ColorFn):
    shape: TargetShape

    def __call__(self, p):
        g = self.shape.gradient(p)
        n = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 0.5 * (n + 1.0)


# ---- Building from config ---------------------------------------------------

def _vec(spec: Mapping[str, Any], key: str, default=None) -> Tuple[float, float, float]:
    value = spec.get(key, default)
    if value is None or len(value) != 3:
        raise ConfigError(f"shape field {key!r} must be a 3-vector")
    return tuple(float(v) for v in value)


def _positive(spec: Mapping[str, Any], key: str) -> float:
    value = spec.get(key)
    if not isinstance(value, (int, float)) or value <= 0:
        raise ConfigError(f"shape field {key!r} must be a positive number, got {value!r}")
    return float(value)


def _build(spec: Mapping[str, Any]) -> TargetShape:
    kind = spec.get("type")
    center = _vec(spec, "center", (0.0, 0.0, 0.0))
    if kind == "sphere":
        return Sphere(_positive(spec, "radius"), center)
    if kind == "ellipsoid":
        axes = _vec(spec, "semi_axes")
        if min(axes) <= 0:
            raise ConfigError("ellipsoid semi_axes must be positive")
        return Ellipsoid(axes, center)
    if kind == "torus":
        return Torus(_positive(spec, "major"), _positive(spec, "minor"), center)
    if kind == "box":
        return Box(_vec(spec, "half_extents"), center)
    if kind == "capsule":
        return Capsule(_vec(spec, "a"), _vec(spec, "b"), _positive(spec, "radius"))
    if kind in ("union", "intersection"):
        children = spec.get("children") or []
        if len(children) < 2:
            raise ConfigError(f"{kind} needs at least two children")
        built = [_build(c) for c in children]
        return Union(built) if kind == "union" else Intersection(built)
    if kind == "difference":
        if "base" not in spec or "cut" not in spec:
            raise ConfigError("difference needs 'base' and 'cut'")
        return Difference(_build(spec["base"]), _build(spec["cut"]))
    raise ConfigError(f"unknown shape type {kind!r}")


def color_from_spec(spec: Mapping[str, Any], shape: TargetShape, bbox=(-0.5, 0.5)) -> ColorFn:
    kind = spec.get("type")
    if kind == "constant":
        return ConstantColor(_vec(spec, "value", (0.5, 0.5, 0.5)))
    if kind == "axis-gradient":
        return AxisGradientColor(tuple(bbox))
    if kind == "normal":
        return NormalColor(shape)
    raise ConfigError(f"unknown color type {kind!r}")


def check_inside(shape: TargetShape, bbox=(-0.5, 0.5), fraction: float = 0.9, samples: int = 24) -> None:
    """Zero level set must lie strictly inside the central `fraction` of the box."""
    lo, hi = bbox
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * fraction
    t = np.linspace(mid - half, mid + half, samples)
    u, v = np.meshgrid(t, t, indexing="ij")
    faces = []
    for axis in range(3):
        for side in (mid - half, mid + half):
            pts = np.empty((u.size, 3))
            others = [a for a in range(3) if a != axis]
            pts[:, axis] = side
            pts[:, others[0]], pts[:, others[1]] = u.ravel(), v.ravel()
            faces.append(pts)
    if shape.sdf(np.concatenate(faces)).min() <= 0.0:
        raise ConfigError(f"target surface reaches outside {fraction:.0%} of the domain box")
    if shape.sdf(np.array([[mid, mid, mid]]))[0] >= 0.0 and shape.sdf(
            np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)).min() >= 0.0:
        raise ConfigError("target shape has no interior inside the domain box")


def shape_from_spec(spec: Mapping[str, Any], bbox=(-0.5, 0.5)) -> TargetShape:
    shape = _build(spec)
    check_inside(shape, bbox)
    if "color" in spec:
        shape.color = color_from_spec(spec["color"], shape, bbox)
    return shape
