"""Hanging-node quadrilateral forests.

A forest is a set of root quadrilaterals, each of which may be split into
four children by connecting the midpoints of opposite edges.  Active
(leaf) cells are kept 2:1 balanced across edges, so every edge carries at
most one hanging node.

Vertices are numbered globally.  Cell vertex order is counterclockwise and
matches the reference corners (0,0), (1,0), (1,1), (0,1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np

Edge = tuple[int, int]

# bottom, right, top, left on the reference square
LOCAL_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))

NEWTON_TOL = 1e-12
NEWTON_MAXIT = 20
CONTAIN_TOL = 1e-10


def edge_key(a: int, b: int) -> Edge:
    return (a, b) if a < b else (b, a)


@dataclass
class Cell:
    vertex_ids: tuple[int, int, int, int]
    level: int
    parent: int | None = None
    children: tuple[int, int, int, int] | None = None
    diameter: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def edges(self) -> list[Edge]:
        v = self.vertex_ids
        return [edge_key(v[i], v[j]) for i, j in LOCAL_EDGES]


class InteriorEdge(NamedTuple):
    p0: np.ndarray
    p1: np.ndarray
    minus: int
    plus: int
    conforming: bool


class MeshForest:
    """Quadtree forest over a conforming root mesh.

    ``projector`` (optional) maps points onto a curved domain boundary; it is
    applied to every new vertex created on a boundary edge.

    Mutating methods (:func:`refine_cells`, :func:`coarsen_cells`) bump
    ``version`` so caches keyed on the forest can detect staleness.
    """

    def __init__(self, vertices, cells, projector: Callable | None = None):
        self.vertices: list[tuple[float, float]] = [
            (float(x), float(y)) for x, y in vertices
        ]
        self.cells: list[Cell] = []
        self.active_cells: set[int] = set()
        self.edge_table: dict[Edge, set[int]] = {}
        self.edge_mid: dict[Edge, int] = {}
        self.edge_parent: dict[Edge, Edge] = {}
        self.boundary: set[Edge] = set()
        self.projector = projector
        self.version = 0
        self._cache: dict = {}

        for vids in cells:
            self._add_cell(tuple(int(v) for v in vids), level=0, parent=None)
        self.roots = list(range(len(self.cells)))
        for e, owners in self.edge_table.items():
            if len(owners) == 1:
                self.boundary.add(e)
        for k in self.roots:
            self._check_orientation(k)

    # -- construction helpers -------------------------------------------------

    def _add_cell(self, vids, level, parent) -> int:
        k = len(self.cells)
        X = np.array([self.vertices[v] for v in vids])
        d = max(np.linalg.norm(X[2] - X[0]), np.linalg.norm(X[3] - X[1]))
        self.cells.append(Cell(vids, level, parent, None, float(d)))
        self._activate(k)
        return k

    def _activate(self, k):
        self.active_cells.add(k)
        for e in self.cells[k].edges():
            self.edge_table.setdefault(e, set()).add(k)

    def _deactivate(self, k):
        self.active_cells.discard(k)
        for e in self.cells[k].edges():
            owners = self.edge_table[e]
            owners.discard(k)
            if not owners:
                del self.edge_table[e]

    def _check_orientation(self, k):
        from .fe import corner_jacobians

        det = corner_jacobians(self.cell_vertices([k]))
        if np.any(det <= 0):
            raise ValueError(f"cell {k} is inverted or not counterclockwise")

    def _midpoint(self, e: Edge) -> int:
        m = self.edge_mid.get(e)
        if m is not None:
            return m
        a, b = e
        p = 0.5 * (np.asarray(self.vertices[a]) + np.asarray(self.vertices[b]))
        on_boundary = e in self.boundary
        if on_boundary and self.projector is not None:
            p = np.asarray(self.projector(p), dtype=float)
        m = len(self.vertices)
        self.vertices.append((float(p[0]), float(p[1])))
        self.edge_mid[e] = m
        for sub in (edge_key(a, m), edge_key(m, b)):
            self.edge_parent[sub] = e
            if on_boundary:
                self.boundary.add(sub)
        return m

    def _split(self, k: int):
        c = self.cells[k]
        v0, v1, v2, v3 = c.vertex_ids
        m01 = self._midpoint(edge_key(v0, v1))
        m12 = self._midpoint(edge_key(v1, v2))
        m23 = self._midpoint(edge_key(v2, v3))
        m30 = self._midpoint(edge_key(v3, v0))
        X = np.array([self.vertices[v] for v in c.vertex_ids])
        ctr = X.mean(axis=0)
        ci = len(self.vertices)
        self.vertices.append((float(ctr[0]), float(ctr[1])))
        self._deactivate(k)
        quads = (
            (v0, m01, ci, m30),
            (m01, v1, m12, ci),
            (ci, m12, v2, m23),
            (m30, ci, m23, v3),
        )
        kids = tuple(self._add_cell(q, c.level + 1, k) for q in quads)
        c.children = kids

    # -- queries ----------------------------------------------------------------

    def active_ids(self) -> np.ndarray:
        key = ("active", self.version)
        if key not in self._cache:
            self._cache = {k: v for k, v in self._cache.items() if k[1] == self.version}
            self._cache[key] = np.array(sorted(self.active_cells), dtype=np.int64)
        return self._cache[key]

    def vertex_array(self) -> np.ndarray:
        key = ("vertices", self.version)
        if key not in self._cache:
            self._cache[key] = np.array(self.vertices, dtype=float)
        return self._cache[key]

    def cell_vertices(self, ids=None) -> np.ndarray:
        """Corner coordinates, shape ``(n, 4, 2)``."""
        if ids is None:
            ids = self.active_ids()
        ids = np.asarray(ids, dtype=np.int64)
        return self.vertex_array()[self.vertex_id_array()[ids]]

    def vertex_id_array(self) -> np.ndarray:
        """Vertex ids of every cell (active or not), shape ``(n_cells, 4)``."""
        key = ("vids", self.version)
        if key not in self._cache:
            self._cache[key] = np.array(
                [c.vertex_ids for c in self.cells], dtype=np.int64
            ).reshape(-1, 4)
        return self._cache[key]

    def children_array(self) -> np.ndarray:
        key = ("children", self.version)
        if key not in self._cache:
            self._cache[key] = np.array(
                [c.children if c.children is not None else (-1, -1, -1, -1) for c in self.cells],
                dtype=np.int64,
            ).reshape(-1, 4)
        return self._cache[key]

    def levels(self, ids=None) -> np.ndarray:
        if ids is None:
            ids = self.active_ids()
        return np.array([self.cells[k].level for k in ids], dtype=np.int64)

    def diameters(self, ids=None) -> np.ndarray:
        if ids is None:
            ids = self.active_ids()
        return np.array([self.cells[k].diameter for k in ids], dtype=float)

    def areas(self, ids=None) -> np.ndarray:
        X = self.cell_vertices(ids)
        x, y = X[..., 0], X[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    @property
    def shape_bound(self) -> float:
        """max over active cells of diameter / (2 * inradius estimate)."""
        X = self.cell_vertices()
        area = self.areas()
        perim = np.linalg.norm(X - np.roll(X, -1, axis=1), axis=2).sum(axis=1)
        rho = 2.0 * area / perim
        return float(np.max(self.diameters() / (2.0 * rho)))

    def coarser_neighbor(self, k: int, e: Edge) -> int | None:
        pe = self.edge_parent.get(e)
        if pe is None:
            return None
        owners = self.edge_table.get(pe)
        if owners:
            return next(iter(owners))
        return None

    def hanging_midpoint(self, e: Edge) -> int | None:
        """Midpoint vertex of edge ``e`` if the far side is refined."""
        m = self.edge_mid.get(e)
        if m is None:
            return None
        a, b = e
        if edge_key(a, m) in self.edge_table and edge_key(m, b) in self.edge_table:
            return m
        return None

    def neighbors(self, k: int) -> list[int]:
        """Active edge-neighbours of active cell ``k``."""
        out = []
        for e in self.cells[k].edges():
            owners = self.edge_table.get(e, set())
            if len(owners) == 2:
                out.extend(o for o in owners if o != k)
                continue
            c = self.coarser_neighbor(k, e)
            if c is not None:
                out.append(c)
                continue
            m = self.hanging_midpoint(e)
            if m is not None:
                for sub in (edge_key(e[0], m), edge_key(m, e[1])):
                    out.extend(self.edge_table[sub])
        return out

    def is_balanced(self) -> bool:
        for k in self.active_cells:
            lk = self.cells[k].level
            for n in self.neighbors(k):
                if abs(self.cells[n].level - lk) > 1:
                    return False
        return True

    def copy(self) -> "MeshForest":
        new = MeshForest.__new__(MeshForest)
        new.vertices = list(self.vertices)
        new.cells = [
            Cell(c.vertex_ids, c.level, c.parent, c.children, c.diameter) for c in self.cells
        ]
        new.active_cells = set(self.active_cells)
        new.edge_table = {e: set(s) for e, s in self.edge_table.items()}
        new.edge_mid = dict(self.edge_mid)
        new.edge_parent = dict(self.edge_parent)
        new.boundary = set(self.boundary)
        new.projector = self.projector
        new.version = self.version
        new.roots = list(self.roots)
        new._cache = {}
        return new

    def _touch(self):
        self.version += 1
        self._cache = {}


# -- mutation ---------------------------------------------------------------------


def refine_cells(forest: MeshForest, flagged: Iterable[int]) -> MeshForest:
    """Split every flagged active cell into four, closing for 2:1 balance.

    The forest is modified in place and returned.
    """
    todo = {int(k) for k in flagged if int(k) in forest.active_cells}
    if not todo:
        return forest
    stack = list(todo)
    while stack:
        k = stack.pop()
        for e in forest.cells[k].edges():
            c = forest.coarser_neighbor(k, e)
            if c is not None and c not in todo:
                todo.add(c)
                stack.append(c)
    for k in sorted(todo, key=lambda k: (forest.cells[k].level, k)):
        forest._split(k)
    forest._touch()
    return forest


def _coarsening_keeps_balance(forest: MeshForest, parent: int) -> bool:
    # after coarsening, the parent (level l) must not face a level l+2 cell
    for child in forest.cells[parent].children:
        for e in forest.cells[child].edges():
            if forest.hanging_midpoint(e) is None:
                continue
            a, b = e
            m = forest.edge_mid[e]
            for sub in (edge_key(a, m), edge_key(m, b)):
                for n in forest.edge_table.get(sub, ()):
                    if n not in forest.cells[parent].children:
                        return False
    return True


def coarsen_cells(forest: MeshForest, flagged: Iterable[int]) -> MeshForest:
    """Merge sibling quadruples that are all flagged, all leaves, and whose
    removal keeps 2:1 balance.  Other flags are ignored.  In place."""
    flagged = {int(k) for k in flagged if int(k) in forest.active_cells}
    parents = sorted({forest.cells[k].parent for k in flagged} - {None})
    changed = False
    for p in parents:
        kids = forest.cells[p].children
        if kids is None or not all(c in flagged and c in forest.active_cells for c in kids):
            continue
        if not _coarsening_keeps_balance(forest, p):
            continue
        for c in kids:
            forest._deactivate(c)
        forest.cells[p].children = None
        forest._activate(p)
        changed = True
    if changed:
        forest._touch()
    return forest


# -- traversal ----------------------------------------------------------------------


def interior_edges(forest: MeshForest) -> list[InteriorEdge]:
    """Each interior edge once.  Nonconforming edges come as the fine-side
    sub-edges, with ``minus`` the fine cell and ``plus`` the coarse one."""
    V = forest.vertex_array()
    out = []
    for k in forest.active_ids():
        for e in forest.cells[k].edges():
            owners = forest.edge_table[e]
            if len(owners) == 2:
                other = max(owners) if min(owners) == k else None
                if other is not None:
                    out.append(InteriorEdge(V[e[0]], V[e[1]], int(k), int(other), True))
                continue
            c = forest.coarser_neighbor(k, e)
            if c is not None:
                out.append(InteriorEdge(V[e[0]], V[e[1]], int(k), int(c), False))
    return out


def boundary_edges(forest: MeshForest) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Edges of active cells lying on the forest boundary."""
    V = forest.vertex_array()
    out = []
    for k in forest.active_ids():
        for e in forest.cells[k].edges():
            if e in forest.boundary and len(forest.edge_table[e]) == 1:
                out.append((V[e[0]], V[e[1]], int(k)))
    return out


def edge_arrays(forest: MeshForest):
    """Interior edges as arrays ``(p0, p1, minus, plus, conforming)``."""
    key = ("edges", forest.version)
    if key not in forest._cache:
        edges = interior_edges(forest)
        if edges:
            p0 = np.array([e.p0 for e in edges])
            p1 = np.array([e.p1 for e in edges])
            mi = np.array([e.minus for e in edges], dtype=np.int64)
            pl = np.array([e.plus for e in edges], dtype=np.int64)
            cf = np.array([e.conforming for e in edges], dtype=bool)
        else:
            p0 = p1 = np.zeros((0, 2))
            mi = pl = np.zeros(0, dtype=np.int64)
            cf = np.zeros(0, dtype=bool)
        forest._cache[key] = (p0, p1, mi, pl, cf)
    return forest._cache[key]


def boundary_edge_arrays(forest: MeshForest):
    key = ("bedges", forest.version)
    if key not in forest._cache:
        edges = boundary_edges(forest)
        if edges:
            p0 = np.array([e[0] for e in edges])
            p1 = np.array([e[1] for e in edges])
            ce = np.array([e[2] for e in edges], dtype=np.int64)
        else:
            p0 = p1 = np.zeros((0, 2))
            ce = np.zeros(0, dtype=np.int64)
        forest._cache[key] = (p0, p1, ce)
    return forest._cache[key]


# -- point location -----------------------------------------------------------------


def inverse_map(X: np.ndarray, p: np.ndarray, tol=NEWTON_TOL, maxit=NEWTON_MAXIT) -> np.ndarray:
    """Reference coordinates of points ``p`` (n,2) in quads ``X`` (n,4,2).

    Newton iteration on the bilinear map from the cell centre.
    """
    X = np.asarray(X, dtype=float)
    p = np.asarray(p, dtype=float)
    xi = np.full(p.shape, 0.5)
    a = X[:, 0]
    b = X[:, 1] - X[:, 0]
    c = X[:, 3] - X[:, 0]
    d = X[:, 0] - X[:, 1] + X[:, 2] - X[:, 3]
    for _ in range(maxit):
        s, t = xi[:, 0:1], xi[:, 1:2]
        r = a + b * s + c * t + d * s * t - p
        Jx = b + d * t
        Jy = c + d * s
        det = Jx[:, 0] * Jy[:, 1] - Jx[:, 1] * Jy[:, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        ds = (Jy[:, 1] * r[:, 0] - Jy[:, 0] * r[:, 1]) / det
        dt = (-Jx[:, 1] * r[:, 0] + Jx[:, 0] * r[:, 1]) / det
        xi[:, 0] -= ds
        xi[:, 1] -= dt
        if np.max(np.abs(ds), initial=0) < tol and np.max(np.abs(dt), initial=0) < tol:
            break
    return xi


def _inside_ref(xi, tol=CONTAIN_TOL):
    return np.all((xi >= -tol) & (xi <= 1 + tol), axis=-1)


def locate_point(forest: MeshForest, p) -> tuple[int, np.ndarray] | None:
    """Containing active cell and reference coordinates, or None.

    Points on shared edges resolve to the lowest-index containing cell.
    """
    p = np.asarray(p, dtype=float).reshape(1, 2)
    hits = []
    frontier = list(forest.roots)
    while frontier:
        X = forest.cell_vertices(frontier)
        xi = inverse_map(X, np.repeat(p, len(frontier), axis=0))
        nxt = []
        for k, r, ok in zip(frontier, xi, _inside_ref(xi)):
            if not ok:
                continue
            ch = forest.cells[k].children
            if ch is None:
                hits.append((k, np.clip(r, 0.0, 1.0)))
            else:
                nxt.extend(ch)
        frontier = nxt
    if not hits:
        # snapped boundary cells need not tile their parents
        hits = _brute_force(forest, p)
        if not hits:
            return None
    k, r = min(hits, key=lambda h: h[0])
    return int(k), r


def _brute_force(forest, p):
    ids = forest.active_ids()
    X = forest.cell_vertices(ids)
    lo = X.min(axis=1) - 1e-9
    hi = X.max(axis=1) + 1e-9
    cand = np.nonzero(np.all((p >= lo) & (p <= hi), axis=1))[0]
    if cand.size == 0:
        return []
    xi = inverse_map(X[cand], np.repeat(p, cand.size, axis=0))
    ok = _inside_ref(xi)
    return [(int(ids[c]), np.clip(r, 0.0, 1.0)) for c, r in zip(cand[ok], xi[ok])]


def locate_points(forest: MeshForest, pts, start=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised location.  Returns (cell ids, reference coords); cell id is
    -1 for points outside the forest.  ``start`` optionally gives a cell per
    point from which the search descends (its ancestors are not revisited)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    n = len(pts)
    cell = np.full(n, -1, dtype=np.int64)
    ref = np.zeros((n, 2))
    if n == 0:
        return cell, ref
    V = forest.vertex_array()
    vid = forest.vertex_id_array()
    children = forest.children_array()

    cur = np.full(n, -1, dtype=np.int64)
    if start is not None:
        cur[:] = start
    todo = np.nonzero(cur < 0)[0]
    for r in forest.roots:
        if todo.size == 0:
            break
        xi = inverse_map(np.repeat(V[vid[r]][None], todo.size, axis=0), pts[todo])
        ok = _inside_ref(xi)
        cur[todo[ok]] = r
        todo = todo[~ok]

    # descend
    active = np.nonzero(cur >= 0)[0]
    while active.size:
        ch = children[cur[active]]
        leaf = ch[:, 0] < 0
        done = active[leaf]
        if done.size:
            X = V[vid[cur[done]]]
            xi = inverse_map(X, pts[done])
            ok = _inside_ref(xi)
            cell[done[ok]] = cur[done[ok]]
            ref[done[ok]] = np.clip(xi[ok], 0.0, 1.0)
        active = active[~leaf]
        ch = ch[~leaf]
        found = np.zeros(active.size, dtype=bool)
        nxt = cur[active].copy()
        for j in range(4):
            sel = np.nonzero(~found)[0]
            if sel.size == 0:
                break
            cj = ch[sel, j]
            xi = inverse_map(V[vid[cj]], pts[active[sel]])
            ok = _inside_ref(xi)
            nxt[sel[ok]] = cj[ok]
            found[sel[ok]] = True
        cur[active] = nxt
        active = active[found]

    missing = np.nonzero(cell < 0)[0]
    if missing.size:
        _nearest_candidates(forest, pts, missing, cell, ref)
        missing = np.nonzero(cell < 0)[0]
    if missing.size:
        _brute_force_many(forest, pts, missing, cell, ref)
    return cell, ref


def _nearest_candidates(forest, pts, idx, cell, ref, k=8):
    from scipy.spatial import cKDTree

    key = ("kdtree", forest.version)
    if key not in forest._cache:
        ids = forest.active_ids()
        X = forest.cell_vertices(ids)
        forest._cache[key] = (cKDTree(X.mean(axis=1)), ids, X)
    tree, ids, X = forest._cache[key]
    if ids.size == 0:
        return
    k = min(k, ids.size)
    _, nn = tree.query(pts[idx], k=k)
    nn = nn.reshape(len(idx), k)
    found = np.zeros(len(idx), dtype=bool)
    for j in range(k):
        sel = np.nonzero(~found)[0]
        if sel.size == 0:
            break
        c = nn[sel, j]
        xi = inverse_map(X[c], pts[idx[sel]])
        ok = _inside_ref(xi)
        cell[idx[sel[ok]]] = ids[c[ok]]
        ref[idx[sel[ok]]] = np.clip(xi[ok], 0.0, 1.0)
        found[sel[ok]] = True


def _brute_force_many(forest, pts, idx, cell, ref):
    ids = forest.active_ids()
    if ids.size == 0:
        return
    X = forest.cell_vertices(ids)
    lo = X.min(axis=1) - 1e-9
    hi = X.max(axis=1) + 1e-9
    for i in idx:
        p = pts[i]
        cand = np.nonzero(np.all((p >= lo) & (p <= hi), axis=1))[0]
        if cand.size == 0:
            continue
        xi = inverse_map(X[cand], np.repeat(p[None], cand.size, axis=0))
        ok = np.nonzero(_inside_ref(xi))[0]
        if ok.size:
            cell[i] = ids[cand[ok[0]]]
            ref[i] = np.clip(xi[ok[0]], 0.0, 1.0)


# -- construction -------------------------------------------------------------------


def structured_forest(x0, x1, y0, y1, nx, ny, projector=None) -> MeshForest:
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    verts = [(x, y) for y in ys for x in xs]
    cells = []
    for j in range(ny):
        for i in range(nx):
            v0 = j * (nx + 1) + i
            cells.append((v0, v0 + 1, v0 + nx + 2, v0 + nx + 1))
    return MeshForest(verts, cells, projector)


def refine_uniform(forest: MeshForest, times: int = 1) -> MeshForest:
    for _ in range(times):
        refine_cells(forest, list(forest.active_cells))
    return forest
