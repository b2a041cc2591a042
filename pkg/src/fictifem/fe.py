"""Reference elements, quadrature, bilinear mappings and DoF layouts."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_EDGES, MeshForest, edge_key


class InvertedCellError(ValueError):
    pass


class ElementKind(enum.Enum):
    Q1 = "Q1"
    Q1B = "Q1B"
    Q2 = "Q2"
    P0 = "P0"

    @property
    def n_local(self) -> int:
        return {"Q1": 4, "Q1B": 5, "Q2": 9, "P0": 1}[self.value]


# -- shape functions ---------------------------------------------------------------

Q1_NODES = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
Q2_NODES = np.array(
    [
        [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0],
        [0.5, 0.0], [1.0, 0.5], [0.5, 1.0], [0.0, 0.5],
        [0.5, 0.5],
    ]
)

# 1D quadratic Lagrange basis at 0, 1/2, 1, indexed by node coordinate
_L2 = {
    0.0: (lambda t: 2 * (t - 0.5) * (t - 1), lambda t: 4 * t - 3, lambda t: 4.0 + 0 * t),
    0.5: (lambda t: 4 * t * (1 - t), lambda t: 4 - 8 * t, lambda t: -8.0 + 0 * t),
    1.0: (lambda t: 2 * t * (t - 0.5), lambda t: 4 * t - 1, lambda t: 4.0 + 0 * t),
}
_L1 = {
    0.0: (lambda t: 1 - t, lambda t: -1.0 + 0 * t),
    1.0: (lambda t: t, lambda t: 1.0 + 0 * t),
}


def _as_points(p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    return p.reshape(-1, 2), single


def shape_values(kind: ElementKind, p) -> np.ndarray:
    """Basis values at reference point(s); shape ``(n_local,)`` or ``(n, n_local)``."""
    P, single = _as_points(p)
    x, y = P[:, 0], P[:, 1]
    if kind is ElementKind.P0:
        out = np.ones((len(P), 1))
    elif kind in (ElementKind.Q1, ElementKind.Q1B):
        cols = [_L1[a][0](x) * _L1[b][0](y) for a, b in Q1_NODES]
        if kind is ElementKind.Q1B:
            cols.append(16.0 * x * (1 - x) * y * (1 - y))
        out = np.stack(cols, axis=1)
    else:
        out = np.stack([_L2[a][0](x) * _L2[b][0](y) for a, b in Q2_NODES], axis=1)
    return out[0] if single else out


def shape_gradients(kind: ElementKind, p) -> np.ndarray:
    """Reference gradients; shape ``(n_local, 2)`` or ``(n, n_local, 2)``."""
    P, single = _as_points(p)
    x, y = P[:, 0], P[:, 1]
    if kind is ElementKind.P0:
        out = np.zeros((len(P), 1, 2))
    elif kind in (ElementKind.Q1, ElementKind.Q1B):
        g = [
            np.stack([_L1[a][1](x) * _L1[b][0](y), _L1[a][0](x) * _L1[b][1](y)], axis=1)
            for a, b in Q1_NODES
        ]
        if kind is ElementKind.Q1B:
            g.append(
                np.stack(
                    [16 * (1 - 2 * x) * y * (1 - y), 16 * x * (1 - x) * (1 - 2 * y)], axis=1
                )
            )
        out = np.stack(g, axis=1)
    else:
        g = [
            np.stack([_L2[a][1](x) * _L2[b][0](y), _L2[a][0](x) * _L2[b][1](y)], axis=1)
            for a, b in Q2_NODES
        ]
        out = np.stack(g, axis=1)
    return out[0] if single else out


def shape_hessians(kind: ElementKind, p) -> np.ndarray:
    """Reference second derivatives; shape ``(n, n_local, 2, 2)``."""
    P, _ = _as_points(p)
    x, y = P[:, 0], P[:, 1]
    n = len(P)
    if kind is ElementKind.P0:
        return np.zeros((n, 1, 2, 2))
    H = []
    if kind in (ElementKind.Q1, ElementKind.Q1B):
        for a, b in Q1_NODES:
            h = np.zeros((n, 2, 2))
            h[:, 0, 1] = h[:, 1, 0] = _L1[a][1](x) * _L1[b][1](y)
            H.append(h)
        if kind is ElementKind.Q1B:
            h = np.zeros((n, 2, 2))
            h[:, 0, 0] = -32 * y * (1 - y)
            h[:, 1, 1] = -32 * x * (1 - x)
            h[:, 0, 1] = h[:, 1, 0] = 16 * (1 - 2 * x) * (1 - 2 * y)
            H.append(h)
    else:
        for a, b in Q2_NODES:
            h = np.zeros((n, 2, 2))
            h[:, 0, 0] = _L2[a][2](x) * _L2[b][0](y)
            h[:, 1, 1] = _L2[a][0](x) * _L2[b][2](y)
            h[:, 0, 1] = h[:, 1, 0] = _L2[a][1](x) * _L2[b][1](y)
            H.append(h)
    return np.stack(H, axis=1)


# -- quadrature --------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def gauss_1d(n: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w)


@lru_cache(maxsize=None)
def gauss_tensor(n: int) -> QuadratureRule:
    g = gauss_1d(n)
    X, Y = np.meshgrid(g.points, g.points, indexing="ij")
    W = np.outer(g.weights, g.weights)
    return QuadratureRule(np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel())


COUPLING_ORDER = 5


def quadrature(kind: ElementKind, purpose: str = "cell") -> QuadratureRule:
    """Gauss rules on [0,1]^2 ('cell', 'coupling') or [0,1] ('edge')."""
    high = kind is ElementKind.Q2
    if purpose == "cell":
        return gauss_tensor(4 if high else 3)
    if purpose == "coupling":
        return gauss_tensor(COUPLING_ORDER)
    if purpose == "edge":
        return gauss_1d(4 if high else 3)
    raise ValueError(f"unknown quadrature purpose {purpose!r}")


# -- geometry ----------------------------------------------------------------------


def map_cells(X: np.ndarray, P: np.ndarray):
    """Bilinear map of cells ``X`` (n,4,2) at reference points ``P`` (q,2).

    Returns physical points (n,q,2), Jacobians (n,q,2,2) with
    ``J[..., k, a] = dx_k / dxi_a``, and determinants (n,q).
    """
    X = np.asarray(X, dtype=float)
    N = shape_values(ElementKind.Q1, P)  # (q,4)
    dN = shape_gradients(ElementKind.Q1, P)  # (q,4,2)
    x = np.einsum("qb,nbk->nqk", N, X)
    J = np.einsum("qba,nbk->nqka", dN, X)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    return x, J, det


def map_cell(vertices, p):
    """Physical point, Jacobian and its determinant for one cell."""
    X = np.asarray(vertices, dtype=float).reshape(1, 4, 2)
    x, J, det = map_cells(X, np.asarray(p, dtype=float).reshape(1, 2))
    if det[0, 0] <= 0:
        raise InvertedCellError(f"non-positive Jacobian determinant {det[0, 0]:.3e}")
    return x[0, 0], J[0, 0], float(det[0, 0])


def corner_jacobians(X: np.ndarray) -> np.ndarray:
    _, _, det = map_cells(X, Q1_NODES)
    return det


def inverse_jacobians(J: np.ndarray, det: np.ndarray) -> np.ndarray:
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 1, 1] = J[..., 0, 0]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    return inv / det[..., None, None]


def physical_gradients(dref: np.ndarray, Jinv: np.ndarray) -> np.ndarray:
    """``dref`` (..., nb, 2) reference gradients -> physical, given J^{-1} (..., 2, 2)."""
    return np.einsum("...ba,...ai->...bi", dref, Jinv)


def physical_laplacians(X: np.ndarray, P: np.ndarray, kind: ElementKind, per_point=False):
    """Physical Laplacian of every basis function.

    Uses the exact second-derivative transform of the bilinear map, so it is
    correct on non-affine cells.  With ``per_point`` the reference points are
    one per cell (``P`` shape (n,2)) and the result has shape (n, nb).
    Otherwise ``P`` is (q,2) shared by all cells and the result is (n,q,nb).
    """
    if per_point:
        X3 = X
        N = shape_values(ElementKind.Q1, P)  # (n,4)
        dN = shape_gradients(ElementKind.Q1, P)  # (n,4,2)
        J = np.einsum("nba,nbk->nka", dN, X3)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = inverse_jacobians(J, det)
        d = X3[:, 0] - X3[:, 1] + X3[:, 2] - X3[:, 3]  # d^2 x / dxi deta, (n,2)
        Hx = np.zeros(X3.shape[:1] + (2, 2, 2))
        Hx[:, :, 0, 1] = d
        Hx[:, :, 1, 0] = d
        g = shape_gradients(kind, P)  # (n,nb,2)
        h = shape_hessians(kind, P)  # (n,nb,2,2)
        # d^2 xi_a / dx_i dx_j = -Jinv[a,k] Hx[k,b,c] Jinv[b,i] Jinv[c,j]
        D2xi = -np.einsum("nak,nkbc,nbi,ncj->naij", Jinv, Hx, Jinv, Jinv)
        lap = np.einsum("nsab,nai,nbi->ns", h, Jinv, Jinv)
        lap += np.einsum("nsa,naii->ns", g, D2xi)
        return lap
    x, J, det = map_cells(X, P)
    Jinv = inverse_jacobians(J, det)
    d = X[:, 0] - X[:, 1] + X[:, 2] - X[:, 3]
    Hx = np.zeros((len(X), 2, 2, 2))
    Hx[:, :, 0, 1] = d
    Hx[:, :, 1, 0] = d
    g = shape_gradients(kind, P)  # (q,nb,2)
    h = shape_hessians(kind, P)  # (q,nb,2,2)
    D2xi = -np.einsum("nqak,nkbc,nqbi,nqcj->nqaij", Jinv, Hx, Jinv, Jinv)
    lap = np.einsum("qsab,nqai,nqbi->nqs", h, Jinv, Jinv)
    lap += np.einsum("qsa,nqaii->nqs", g, D2xi)
    return lap


# -- DoF layouts -------------------------------------------------------------------


@dataclass
class DofLayout:
    """Global DoF numbering on the active cells of one forest.

    ``constraints`` maps a constrained DoF to its (master, weight) list; the
    list is flattened so masters are never themselves constrained.
    """

    kind: ElementKind
    cell_ids: np.ndarray
    cell_to_dofs: np.ndarray
    n_dofs: int
    constraints: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    node_points: np.ndarray | None = None
    forest_version: int = -1

    def __post_init__(self):
        size = int(self.cell_ids.max()) + 1 if len(self.cell_ids) else 0
        self._row_map = np.full(size, -1, dtype=np.int64)
        self._row_map[self.cell_ids] = np.arange(len(self.cell_ids))
        is_fixed = np.zeros(self.n_dofs, dtype=bool)
        is_fixed[list(self.constraints)] = True
        is_fixed[self.dirichlet] = True
        self.free = np.nonzero(~is_fixed)[0]
        self._build_prolongation()

    def row_of(self, cell_ids) -> np.ndarray:
        """Layout rows of active cell ids (-1 for cells not in the layout)."""
        ids = np.asarray(cell_ids, dtype=np.int64)
        out = np.full(ids.shape, -1, dtype=np.int64)
        ok = (ids >= 0) & (ids < len(self._row_map))
        out[ok] = self._row_map[ids[ok]]
        return out

    @property
    def n_free(self) -> int:
        return len(self.free)

    def _build_prolongation(self):
        n = self.n_dofs
        free_index = np.full(n, -1, dtype=np.int64)
        free_index[self.free] = np.arange(len(self.free))
        dir_index = np.full(n, -1, dtype=np.int64)
        dir_index[self.dirichlet] = np.arange(len(self.dirichlet))
        rows, cols, vals = list(self.free), list(range(len(self.free))), [1.0] * len(self.free)
        drows, dcols, dvals = list(self.dirichlet), list(range(len(self.dirichlet))), [1.0] * len(
            self.dirichlet
        )
        for c, masters in self.constraints.items():
            for m, w in masters:
                if free_index[m] >= 0:
                    rows.append(c), cols.append(free_index[m]), vals.append(w)
                elif dir_index[m] >= 0:
                    drows.append(c), dcols.append(dir_index[m]), dvals.append(w)
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(self.free)))
        self.Pd = sp.csr_matrix((dvals, (drows, dcols)), shape=(n, len(self.dirichlet)))

    def expand(self, free_values, dirichlet_values=None) -> np.ndarray:
        """Full DoF vector from free values (and Dirichlet data)."""
        u = self.P @ np.asarray(free_values, dtype=float)
        if dirichlet_values is not None and len(self.dirichlet):
            u = u + self.Pd @ np.asarray(dirichlet_values, dtype=float)
        return u

    def distribute(self, u: np.ndarray) -> np.ndarray:
        """Overwrite constrained entries of ``u`` from their masters."""
        u = np.array(u, dtype=float)
        for c, masters in self.constraints.items():
            u[c] = sum(w * u[m] for m, w in masters)
        return u


def _flatten(constraints):
    """Substitute constrained masters until every master is unconstrained."""
    changed = True
    while changed:
        changed = False
        for c, masters in constraints.items():
            if any(m in constraints for m, _ in masters):
                acc: dict[int, float] = {}
                for m, w in masters:
                    if m in constraints:
                        for mm, ww in constraints[m]:
                            acc[mm] = acc.get(mm, 0.0) + w * ww
                    else:
                        acc[m] = acc.get(m, 0.0) + w
                constraints[c] = sorted(acc.items())
                changed = True
    return constraints


def build_dof_layout(forest: MeshForest, kind: ElementKind, dirichlet_boundary: bool = False) -> DofLayout:
    """Number DoFs on the active cells of ``forest`` and constrain hanging ones."""
    ids = forest.active_ids()
    vids = forest.vertex_id_array()[ids]
    V = forest.vertex_array()
    n_cells = len(ids)

    if kind is ElementKind.P0:
        return DofLayout(kind, ids, np.arange(n_cells)[:, None], n_cells,
                         node_points=_centroids(V[vids]), forest_version=forest.version)

    used = np.unique(vids)
    vdof = {int(v): i for i, v in enumerate(used)}
    n = len(used)
    node_points = [V[used]]
    cell_to_dofs = np.vectorize(vdof.__getitem__, otypes=[np.int64])(vids) if n_cells else np.zeros((0, 4), dtype=np.int64)
    constraints: dict[int, list[tuple[int, float]]] = {}

    edof: dict = {}
    if kind is ElementKind.Q2:
        edges = sorted({edge_key(r[i], r[j]) for r in vids.tolist() for i, j in LOCAL_EDGES})
        edof = {e: n + i for i, e in enumerate(edges)}
        if edges:
            E = np.array(edges)
            node_points.append(0.5 * (V[E[:, 0]] + V[E[:, 1]]))
        n += len(edges)
        ecols = np.array(
            [[edof[edge_key(r[i], r[j])] for i, j in LOCAL_EDGES] for r in vids.tolist()],
            dtype=np.int64,
        ).reshape(-1, 4)
        centers = n + np.arange(n_cells)
        node_points.append(_centroids(V[vids]))
        n += n_cells
        cell_to_dofs = np.hstack([cell_to_dofs, ecols, centers[:, None]])
    elif kind is ElementKind.Q1B:
        bubbles = n + np.arange(n_cells)
        node_points.append(np.full((n_cells, 2), np.nan))
        n += n_cells
        cell_to_dofs = np.hstack([cell_to_dofs, bubbles[:, None]])

    # hanging nodes: coarse-side edges whose midpoint is used by the fine side
    for r in vids.tolist():
        for i, j in LOCAL_EDGES:
            e = edge_key(r[i], r[j])
            m = forest.hanging_midpoint(e)
            if m is None:
                continue
            a, b = e
            if kind is ElementKind.Q2:
                c = edof[e]
                constraints[vdof[m]] = [(c, 1.0)]
                constraints[edof[edge_key(a, m)]] = [(vdof[a], 0.375), (c, 0.75), (vdof[b], -0.125)]
                constraints[edof[edge_key(m, b)]] = [(vdof[a], -0.125), (c, 0.75), (vdof[b], 0.375)]
            else:
                constraints[vdof[m]] = [(vdof[a], 0.5), (vdof[b], 0.5)]
    constraints = _flatten(constraints)

    dirichlet = np.zeros(0, dtype=np.int64)
    if dirichlet_boundary:
        dset = set()
        for r in vids.tolist():
            for i, j in LOCAL_EDGES:
                e = edge_key(r[i], r[j])
                if e in forest.boundary and len(forest.edge_table[e]) == 1:
                    dset.update((vdof[e[0]], vdof[e[1]]))
                    if kind is ElementKind.Q2:
                        dset.add(edof[e])
        dirichlet = np.array(sorted(dset), dtype=np.int64)

    return DofLayout(
        kind, ids, cell_to_dofs, n, constraints, dirichlet,
        np.vstack(node_points), forest.version,
    )


def _centroids(X):
    return X.mean(axis=1)


# -- evaluation --------------------------------------------------------------------


def evaluate_at(layout: DofLayout, X: np.ndarray, rows: np.ndarray, ref: np.ndarray,
                coeffs: np.ndarray, gradients: bool = True):
    """Evaluate a FE function at one reference point per entry.

    ``rows`` index layout cells, ``X`` are the matching corner coordinates
    (n,4,2), ``ref`` (n,2).  Returns values (n,) and physical gradients (n,2).
    """
    C = coeffs[layout.cell_to_dofs[rows]]  # (n,nb)
    phi = shape_values(layout.kind, ref).reshape(len(ref), -1)
    val = np.einsum("nb,nb->n", C, phi)
    if not gradients:
        return val, None
    dN = shape_gradients(ElementKind.Q1, ref).reshape(len(ref), 4, 2)
    J = np.einsum("nba,nbk->nka", dN, X)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    Jinv = inverse_jacobians(J, det)
    dphi = shape_gradients(layout.kind, ref).reshape(len(ref), -1, 2)
    g = np.einsum("nb,nba,nai->ni", C, dphi, Jinv)
    return val, g


def evaluate_on_cells(layout: DofLayout, X: np.ndarray, rows: np.ndarray, P: np.ndarray,
                      coeffs: np.ndarray, laplacian: bool = False):
    """Evaluate at shared reference points ``P`` (q,2) on cells ``rows``.

    Returns values (n,q), gradients (n,q,2) and optionally Laplacians (n,q).
    """
    C = coeffs[layout.cell_to_dofs[rows]]
    phi = shape_values(layout.kind, P).reshape(len(P), -1)
    val = C @ phi.T
    _, J, det = map_cells(X, P)
    Jinv = inverse_jacobians(J, det)
    dphi = shape_gradients(layout.kind, P).reshape(len(P), -1, 2)
    g = np.einsum("nb,qba,nqai->nqi", C, dphi, Jinv)
    if not laplacian:
        return val, g
    lap = np.einsum("nb,nqb->nq", C, physical_laplacians(X, P, layout.kind))
    return val, g, lap
