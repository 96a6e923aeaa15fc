"""Analytic unsigned distance fields with exact ray-intersection oracles.

Every field exposes ``eval(x) -> (d, g)`` for an ``(N, 3)`` float64 array of
points: ``d`` is the unsigned distance and ``g`` its spatial gradient (unit
length away from the surface, the zero vector on it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import jsonschema
import numpy as np

GRAZE_COS = 1e-4


class DistanceField(Protocol):
    def eval(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != 3:
        raise ValueError(f"points must have trailing dimension 3, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points must be finite")
    return x


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length direction")
    return v / n


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    w = np.cross(normal, u)
    return u, w


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    v: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.o, dtype=np.float64).reshape(3)
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be smaller than t_far")
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "v", v)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.o + t[..., None] * self.v


@dataclass(frozen=True)
class Sphere:
    center: Sequence[float]
    radius: float
    albedo: Sequence[float] = (0.8, 0.8, 0.8)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        rel = x - c
        n = np.linalg.norm(rel, axis=-1, keepdims=True)
        # the center is equidistant to the whole sphere; pick +z
        safe = np.where(n > 0, rel / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))
        return c + self.radius * safe

    def intersect(self, o: np.ndarray, v: np.ndarray) -> list[tuple[float, float]]:
        c = np.asarray(self.center, dtype=np.float64)
        oc = o - c
        b = float(oc @ v)
        disc = b * b - (float(oc @ oc) - self.radius**2)
        if disc <= 0:
            return []
        root = np.sqrt(disc)
        hits = []
        for t in (-b - root, -b + root):
            normal = _unit(o + t * v - c)
            hits.append((t, float(normal @ v)))
        return hits


@dataclass(frozen=True)
class Disk:
    center: Sequence[float]
    normal: Sequence[float]
    radius: float
    albedo: Sequence[float] = (0.8, 0.8, 0.8)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        n = _unit(self.normal)
        rel = x - c
        inplane = rel - (rel @ n)[..., None] * n
        rho = np.linalg.norm(inplane, axis=-1, keepdims=True)
        scale = np.where(rho > self.radius, self.radius / np.where(rho > 0, rho, 1.0), 1.0)
        return c + inplane * scale

    def intersect(self, o: np.ndarray, v: np.ndarray) -> list[tuple[float, float]]:
        c = np.asarray(self.center, dtype=np.float64)
        n = _unit(self.normal)
        cos = float(n @ v)
        if cos == 0.0:
            return []
        t = float((c - o) @ n) / cos
        if np.linalg.norm(o + t * v - c) > self.radius:
            return []
        return [(t, cos)]


@dataclass(frozen=True)
class Rectangle:
    """Planar segment spanned by ``half_extents`` along two in-plane axes.

    The first axis is ``normal x e_x`` (``normal x e_y`` when the normal is
    near e_x), the second completes the right-handed frame.
    """

    center: Sequence[float]
    normal: Sequence[float]
    half_extents: Sequence[float]
    albedo: Sequence[float] = (0.8, 0.8, 0.8)

    def _frame(self):
        n = _unit(self.normal)
        u, w = _plane_basis(n)
        return np.asarray(self.center, dtype=np.float64), n, u, w

    def nearest(self, x: np.ndarray) -> np.ndarray:
        c, _, u, w = self._frame()
        rel = x - c
        a = np.clip(rel @ u, -self.half_extents[0], self.half_extents[0])
        b = np.clip(rel @ w, -self.half_extents[1], self.half_extents[1])
        return c + a[..., None] * u + b[..., None] * w

    def intersect(self, o: np.ndarray, v: np.ndarray) -> list[tuple[float, float]]:
        c, n, u, w = self._frame()
        cos = float(n @ v)
        if cos == 0.0:
            return []
        t = float((c - o) @ n) / cos
        rel = o + t * v - c
        if abs(rel @ u) > self.half_extents[0] or abs(rel @ w) > self.half_extents[1]:
            return []
        return [(t, cos)]


Primitive = Sphere | Disk | Rectangle


@dataclass(frozen=True)
class AnalyticScene:
    """Union of primitives; the distance is the minimum over primitives."""

    primitives: tuple[Primitive, ...]
    name: str = "scene"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def closest(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return distance, nearest surface point and owning primitive index."""
        x = _as_points(x)
        nearest = np.stack([p.nearest(x) for p in self.primitives])
        dists = np.linalg.norm(x[None] - nearest, axis=-1)
        # ties on the medial axis resolve to the lowest primitive index
        idx = np.argmin(dists, axis=0)
        cols = np.arange(x.shape[0])
        return dists[idx, cols], nearest[idx, cols], idx

    def eval(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = _as_points(x)
        d, q, _ = self.closest(x)
        diff = x - q
        pos = d > 0
        g = np.zeros_like(x)
        g[pos] = diff[pos] / d[pos, None]
        return d, g

    def cusp_mask(self, x) -> np.ndarray:
        d, _ = self.eval(x)
        return d == 0

    def albedo(self, x) -> np.ndarray:
        _, _, idx = self.closest(x)
        table = np.array([p.albedo for p in self.primitives], dtype=np.float64)
        return table[idx]

    def hits(self, ray: Ray) -> list[tuple[float, float, int]]:
        """Transversal hits ``(t, cos, primitive)`` inside the ray bounds, sorted."""
        out = []
        for k, prim in enumerate(self.primitives):
            for t, cos in prim.intersect(ray.o, ray.v):
                if abs(cos) < GRAZE_COS:
                    continue
                if ray.t_near <= t <= ray.t_far:
                    out.append((t, cos, k))
        out.sort(key=lambda h: h[0])
        merged = []
        for h in out:
            if merged and h[0] <= merged[-1][0]:
                continue
            merged.append(h)
        return merged


def ray_intersections(scene: AnalyticScene, ray: Ray) -> list[float]:
    return [t for t, _, _ in scene.hits(ray)]


def evaluate(field: DistanceField, x) -> tuple[np.ndarray, np.ndarray]:
    return field.eval(_as_points(x))


@dataclass
class Projection:
    points: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)


def project_to_surface(field: DistanceField, x, iters: int = 8, tol: float = 1e-12) -> Projection:
    """Move points onto the zero level set by ``x <- x - d * g / |g|``.

    Points whose gradient vanishes stay put; callers filter on ``residual``.
    """
    x = _as_points(x).copy()
    d, g = field.eval(x)
    history = [d.copy()]
    for _ in range(iters):
        active = d > tol
        if not active.any():
            break
        gn = np.linalg.norm(g, axis=-1)
        step = active & (gn > 0)
        x[step] -= (d[step] / gn[step])[:, None] * g[step]
        d, g = field.eval(x)
        history.append(d.copy())
    return Projection(points=x, residual=d, converged=d <= tol, history=history)


SCENE_SCHEMA = {
    "type": "object",
    "required": ["primitives"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "primitives": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["type"],
                "properties": {"type": {"enum": ["sphere", "disk", "rectangle"]}},
                "allOf": [
                    {
                        "if": {"properties": {"type": {"const": "sphere"}}},
                        "then": {
                            "required": ["center", "radius"],
                            "additionalProperties": False,
                            "properties": {
                                "type": {},
                                "center": {"$ref": "#/$defs/vec3"},
                                "radius": {"type": "number", "exclusiveMinimum": 0},
                                "albedo": {"$ref": "#/$defs/rgb"},
                            },
                        },
                    },
                    {
                        "if": {"properties": {"type": {"const": "disk"}}},
                        "then": {
                            "required": ["center", "normal", "radius"],
                            "additionalProperties": False,
                            "properties": {
                                "type": {},
                                "center": {"$ref": "#/$defs/vec3"},
                                "normal": {"$ref": "#/$defs/vec3"},
                                "radius": {"type": "number", "exclusiveMinimum": 0},
                                "albedo": {"$ref": "#/$defs/rgb"},
                            },
                        },
                    },
                    {
                        "if": {"properties": {"type": {"const": "rectangle"}}},
                        "then": {
                            "required": ["center", "normal", "half_extents"],
                            "additionalProperties": False,
                            "properties": {
                                "type": {},
                                "center": {"$ref": "#/$defs/vec3"},
                                "normal": {"$ref": "#/$defs/vec3"},
                                "half_extents": {
                                    "type": "array",
                                    "items": {"type": "number", "exclusiveMinimum": 0},
                                    "minItems": 2,
                                    "maxItems": 2,
                                },
                                "albedo": {"$ref": "#/$defs/rgb"},
                            },
                        },
                    },
                ],
            },
        },
    },
    "$defs": {
        "vec3": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "rgb": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 3,
            "maxItems": 3,
        },
    },
}

_KINDS = {"sphere": Sphere, "disk": Disk, "rectangle": Rectangle}


def scene_from_dict(doc: dict) -> AnalyticScene:
    jsonschema.validate(doc, SCENE_SCHEMA)
    prims = []
    for item in doc["primitives"]:
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in item.items() if k != "type"}
        if item["type"] != "sphere" and np.linalg.norm(kwargs["normal"]) == 0:
            raise ValueError("primitive normal must be non-zero")
        prims.append(_KINDS[item["type"]](**kwargs))
    return AnalyticScene(tuple(prims), name=doc.get("name", "scene"))


def scene_to_dict(scene: AnalyticScene) -> dict:
    kinds = {Sphere: "sphere", Disk: "disk", Rectangle: "rectangle"}
    prims = []
    for p in scene.primitives:
        item = {"type": kinds[type(p)]}
        for k, v in p.__dict__.items():
            item[k] = [float(a) for a in v] if isinstance(v, (tuple, list, np.ndarray)) else float(v)
        prims.append(item)
    return {"name": scene.name, "primitives": prims}


def load_scene(path) -> AnalyticScene:
    with open(Path(path)) as fh:
        return scene_from_dict(json.load(fh))


def builtin_scene(name: str) -> AnalyticScene:
    if name == "disk":
        return AnalyticScene((Disk((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.5, (0.9, 0.5, 0.2)),), name="disk")
    if name in ("two-planes", "two-disks"):
        return AnalyticScene(
            (
                Disk((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.5, (0.9, 0.5, 0.2)),
                Disk((0.0, 0.0, 0.5), (0.0, 0.0, 1.0), 0.5, (0.2, 0.5, 0.9)),
            ),
            name="two-planes",
        )
    if name == "sphere":
        return AnalyticScene((Sphere((0.0, 0.0, 0.0), 0.5, (0.3, 0.8, 0.4)),), name="sphere")
    raise KeyError(f"unknown built-in scene {name!r}")


BUILTIN_SCENES = ("disk", "two-planes", "sphere")
