"""Analytic background and immersed domains."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import MeshForest, refine_uniform, structured_forest

BOUNDARY_TOL = 1e-12
SHAPES = ("rectangle", "square", "circle", "flower", "lshape")


class DegenerateProjection(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """A background rectangle or one of the immersed shapes.

    ``bounds`` is (x0, x1, y0, y1) for rectangle/square/lshape; ``cut`` is the
    removed corner box of an L-shape.  Circles are flowers with zero
    amplitude.
    """

    shape: str
    bounds: tuple[float, float, float, float] | None = None
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    amplitude: float = 0.0
    petals: int = 0
    cut: tuple[float, float, float, float] | None = None
    role: str = "immersed"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.shape in ("circle", "flower"):
            if self.radius - abs(self.amplitude) <= 0:
                raise ValueError("flower radius must stay positive")
        elif self.bounds is None:
            raise ValueError(f"{self.shape} needs bounds")
        if self.shape == "lshape" and self.cut is None:
            raise ValueError("lshape needs the removed corner box")

    @property
    def curved(self) -> bool:
        return self.shape in ("circle", "flower")

    def radius_at(self, theta):
        if self.shape == "circle":
            return np.full_like(np.asarray(theta, dtype=float), self.radius)
        return self.radius + self.amplitude * np.cos(self.petals * np.asarray(theta))


def rectangle(x0, x1, y0, y1, role="background") -> DomainSpec:
    return DomainSpec("rectangle", (x0, x1, y0, y1), role=role)


def square(x0, x1, role="immersed") -> DomainSpec:
    return DomainSpec("square", (x0, x1, x0, x1), role=role)


def circle(center=(0.0, 0.0), radius=1.0) -> DomainSpec:
    return DomainSpec("circle", center=tuple(center), radius=radius)


def flower(center=(0.0, 0.0), r0=1.0, amplitude=0.1, petals=5) -> DomainSpec:
    return DomainSpec("flower", center=tuple(center), radius=r0, amplitude=amplitude, petals=petals)


def lshape(outer, removed) -> DomainSpec:
    return DomainSpec("lshape", tuple(outer), cut=tuple(removed))


def _polar(spec, p):
    p = np.asarray(p, dtype=float)
    d = p - np.asarray(spec.center)
    rho = np.hypot(d[..., 0], d[..., 1])
    theta = np.arctan2(d[..., 1], d[..., 0])
    return rho, theta


def inside(spec: DomainSpec, p) -> np.ndarray | bool:
    """Closed-domain membership; points within 1e-12 of the boundary count."""
    p = np.asarray(p, dtype=float)
    scalar = p.ndim == 1
    p = p.reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    t = BOUNDARY_TOL
    if spec.curved:
        rho, theta = _polar(spec, p)
        res = rho <= spec.radius_at(theta) + t
    else:
        x0, x1, y0, y1 = spec.bounds
        res = (x >= x0 - t) & (x <= x1 + t) & (y >= y0 - t) & (y <= y1 + t)
        if spec.shape == "lshape":
            c0, c1, d0, d1 = spec.cut
            res &= ~((x > c0 + t) & (x < c1 - t) & (y > d0 + t) & (y < d1 - t))
    return bool(res[0]) if scalar else res


def project_to_boundary(spec: DomainSpec, p) -> np.ndarray:
    """Radial projection onto a circle or flower boundary."""
    if not spec.curved:
        raise ValueError("projection is defined for circle and flower domains only")
    p = np.asarray(p, dtype=float)
    rho, theta = _polar(spec, p)
    if np.any(rho == 0.0):
        raise DegenerateProjection("cannot project the centre onto the boundary")
    r = spec.radius_at(theta)
    c = np.asarray(spec.center)
    return c + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def area(spec: DomainSpec) -> float:
    if spec.shape == "circle":
        return math.pi * spec.radius**2
    if spec.shape == "flower":
        return math.pi * (spec.radius**2 + 0.5 * spec.amplitude**2)
    x0, x1, y0, y1 = spec.bounds
    a = (x1 - x0) * (y1 - y0)
    if spec.shape == "lshape":
        c0, c1, d0, d1 = spec.cut
        a -= (c1 - c0) * (d1 - d0)
    return a


def boundary_polyline(spec: DomainSpec, n: int = 4096) -> np.ndarray:
    """Closed polyline (first point repeated at the end) tracing the boundary."""
    if spec.curved:
        th = np.linspace(0.0, 2 * math.pi, n + 1)
        r = spec.radius_at(th)
        c = np.asarray(spec.center)
        return c + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
    x0, x1, y0, y1 = spec.bounds
    if spec.shape == "lshape":
        c0, c1, d0, d1 = spec.cut
        # removed box shares the (x1, y1) corner
        pts = [(x0, y0), (x1, y0), (x1, d0), (c0, d0), (c0, y1), (x0, y1), (x0, y0)]
    else:
        pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    return np.array(pts, dtype=float)


def distance_to_boundary(spec: DomainSpec, p, n: int = 4096) -> np.ndarray:
    """Unsigned distance from points to the boundary (polyline for curves)."""
    p = np.asarray(p, dtype=float).reshape(-1, 2)
    if spec.shape == "circle":
        rho, _ = _polar(spec, p)
        return np.abs(rho - spec.radius)
    poly = boundary_polyline(spec, n)
    a, b = poly[:-1], poly[1:]
    ab = b - a
    L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    out = np.empty(len(p))
    for s in range(0, len(p), 512):
        q = p[s:s + 512, None, :]
        t = np.clip(np.sum((q - a) * ab, axis=2) / L2, 0.0, 1.0)
        proj = a + t[..., None] * ab
        out[s:s + 512] = np.sqrt(np.min(np.sum((q - proj) ** 2, axis=2), axis=1))
    return out


def initial_mesh(spec: DomainSpec, level: int = 0) -> MeshForest:
    """Root layout for the domain followed by ``level`` uniform refinements."""
    if not 0 <= level <= 12:
        raise ValueError("level must lie in [0, 12]")
    if spec.shape in ("rectangle", "square"):
        x0, x1, y0, y1 = spec.bounds
        w, h = x1 - x0, y1 - y0
        nx = max(1, round(w / min(w, h)))
        ny = max(1, round(h / min(w, h)))
        forest = structured_forest(x0, x1, y0, y1, nx, ny)
    elif spec.shape == "lshape":
        forest = _lshape_forest(spec)
    else:
        forest = _disk_forest(spec)
    return refine_uniform(forest, level)


def _lshape_forest(spec):
    x0, x1, y0, y1 = spec.bounds
    c0, c1, d0, d1 = spec.cut
    xs, ys = [x0, c0, x1], [y0, d0, y1]
    verts = [(x, y) for y in ys for x in xs]
    cells = []
    for j in range(2):
        for i in range(2):
            if i == 1 and j == 1:
                continue
            v0 = 3 * j + i
            cells.append((v0, v0 + 1, v0 + 4, v0 + 3))
    return MeshForest(verts, cells)


def _disk_forest(spec):
    cx, cy = spec.center
    s = 0.4 * spec.radius
    inner = [(cx - s, cy - s), (cx + s, cy - s), (cx + s, cy + s), (cx - s, cy + s)]
    angles = [5 * math.pi / 4, 7 * math.pi / 4, math.pi / 4, 3 * math.pi / 4]
    outer = [tuple(project_to_boundary(spec, (cx + math.cos(a), cy + math.sin(a)))) for a in angles]
    verts = inner + outer
    # inner 0..3, outer 4..7
    cells = [
        (0, 1, 2, 3),
        (4, 5, 1, 0),
        (5, 6, 2, 1),
        (6, 7, 3, 2),
        (7, 4, 0, 3),
    ]
    return MeshForest(verts, cells, projector=lambda p: project_to_boundary(spec, p))
