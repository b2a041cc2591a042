"""Evaluation across the background and immersed meshes."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import fe
from .geometry import DomainSpec, inside
from .mesh import MeshForest, locate_points


class LocationError(RuntimeError):
    pass


class CouplingPoints(NamedTuple):
    """Quadrature data on immersed cells, located in the background forest.

    All arrays are indexed (immersed cell row, quadrature point).
    """

    cell_ids: np.ndarray
    points: np.ndarray
    wdet: np.ndarray
    bg_cells: np.ndarray
    bg_ref: np.ndarray


class CrossEvalCache:
    """Background location of immersed-cell quadrature points.

    Entries are keyed by immersed cell id.  Cell geometry never changes once
    created, so an entry stays valid while its background cell is active;
    after a background mutation only the points whose cell was refined or
    coarsened away are located again (refined cells are searched from the
    stale cell downwards).
    """

    def __init__(self):
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def clear(self):
        self._store.clear()

    def coupling(self, forest1: MeshForest, forest2: MeshForest,
                 rule: fe.QuadratureRule | None = None, t2_ids=None) -> CouplingPoints:
        rule = rule or fe.quadrature(fe.ElementKind.P0, "coupling")
        if t2_ids is None:
            t2_ids = forest2.active_ids()
        t2_ids = np.asarray(t2_ids, dtype=np.int64)
        X2 = forest2.cell_vertices(t2_ids)
        pts, _, det = fe.map_cells(X2, rule.points)
        wdet = det * rule.weights
        q = len(rule)

        key = (forest1, forest2, len(rule), float(rule.points.sum()))
        entry = self._store.get(key)
        cells = np.full((len(t2_ids), q), -1, dtype=np.int64)
        ref = np.zeros((len(t2_ids), q, 2))
        have = np.zeros(len(t2_ids), dtype=bool)
        if entry is not None:
            ids0, cells0, ref0, v1 = entry
            pos = np.searchsorted(ids0, t2_ids)
            pos = np.clip(pos, 0, max(len(ids0) - 1, 0))
            have = (len(ids0) > 0) & (ids0[pos] == t2_ids) if len(ids0) else have
            cells[have] = cells0[pos[have]]
            ref[have] = ref0[pos[have]]
            if v1 != forest1.version and have.any():
                act = np.zeros(len(forest1.cells), dtype=bool)
                act[forest1.active_ids()] = True
                stale = have[:, None] & ~act[np.where(cells >= 0, cells, 0)]
                if stale.any():
                    flat = np.nonzero(stale.ravel())[0]
                    old = cells.ravel()[flat]
                    start = np.array(
                        [c if forest1.cells[c].children is not None else -1 for c in old],
                        dtype=np.int64,
                    )
                    c_new, r_new = locate_points(forest1, pts.reshape(-1, 2)[flat], start=start)
                    cells.reshape(-1)[flat] = c_new
                    ref.reshape(-1, 2)[flat] = r_new
        self.hits += int(have.sum())
        miss = ~have
        self.misses += int(miss.sum())
        if miss.any():
            c_new, r_new = locate_points(forest1, pts[miss].reshape(-1, 2))
            cells[miss] = c_new.reshape(-1, q)
            ref[miss] = r_new.reshape(-1, q, 2)
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise LocationError(
                f"immersed quadrature point {bad} lies outside the background mesh"
            )
        order = np.argsort(t2_ids, kind="stable")
        self._store[key] = (t2_ids[order], cells[order], ref[order], forest1.version)
        return CouplingPoints(t2_ids, pts, wdet, cells, ref)


def coupling_quadrature(forest1: MeshForest, forest2: MeshForest, cache: CrossEvalCache | None = None,
                        cell2=None, rule: fe.QuadratureRule | None = None) -> CouplingPoints:
    """Mapped, weighted and located quadrature points of immersed cells."""
    cache = cache or CrossEvalCache()
    ids = None if cell2 is None else np.atleast_1d(cell2)
    return cache.coupling(forest1, forest2, rule, ids)


def eval_located(layout: fe.DofLayout, forest: MeshForest, coeffs, cells, ref, gradients=True):
    """Evaluate a FE function at points already located in ``forest``."""
    cells = np.asarray(cells, dtype=np.int64).ravel()
    ref = np.asarray(ref, dtype=float).reshape(-1, 2)
    rows = layout.row_of(cells)
    if np.any(rows < 0):
        raise LocationError("located cell is not part of the layout (stale location?)")
    X = forest.cell_vertices(cells)
    return fe.evaluate_at(layout, X, rows, ref, np.asarray(coeffs, dtype=float), gradients)


def eval_background(layout: fe.DofLayout, forest: MeshForest, coeffs, points):
    """Value and physical gradient of a background FE function at points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    cells, ref = locate_points(forest, pts)
    if np.any(cells < 0):
        raise LocationError(f"point {pts[cells < 0][0]} lies outside the background mesh")
    val, grad = eval_located(layout, forest, coeffs, cells, ref)
    if single:
        return float(val[0]), grad[0]
    return val, grad


def eval_multiplier(forest2: MeshForest, lam, points, spec: DomainSpec,
                    layout: fe.DofLayout | None = None, fill_sliver: bool = False) -> np.ndarray:
    """Zero extension of the piecewise-constant multiplier.

    Membership uses the analytic domain.  Points inside the analytic domain
    but outside every immersed cell (the sliver between the polygonal mesh
    and a curved boundary) give 0, unless ``fill_sliver`` is set; then they
    take the value of the cell found by pulling the point radially towards
    the domain centre.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    lam = np.asarray(lam, dtype=float)
    if layout is None:
        layout = fe.build_dof_layout(forest2, fe.ElementKind.P0)
    out = np.zeros(len(pts))
    ins = np.nonzero(inside(spec, pts))[0]
    if ins.size:
        cells, _ = locate_points(forest2, pts[ins])
        if fill_sliver and np.any(cells < 0) and spec.curved:
            miss = np.nonzero(cells < 0)[0]
            c = np.asarray(spec.center)
            for shrink in (1e-6, 1e-4, 1e-3, 1e-2, 3e-2, 0.1, 0.3):
                if miss.size == 0:
                    break
                q = c + (pts[ins[miss]] - c) * (1.0 - shrink)
                cm, _ = locate_points(forest2, q)
                cells[miss[cm >= 0]] = cm[cm >= 0]
                miss = miss[cm < 0]
        ok = cells >= 0
        rows = layout.row_of(cells[ok])
        out[ins[ok]] = lam[layout.cell_to_dofs[rows, 0]]
    return float(out[0]) if single else out
