"""Saddle-point system for the fictitious-domain interface problem.

Unknowns are the background field u_h (on Omega), the immersed field u_2h
(on Omega_2) and a piecewise-constant multiplier lambda_h on the immersed
cells.  The assembled operator is

    [[A,  0,   C^T],
     [0,  A2, -M^T],
     [C, -M,   0  ]]

with A the beta-stiffness on Omega, A2 the (beta2 - beta)-stiffness on
Omega_2, C and M the multiplier pairings with u_h|Omega_2 and u_2h.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from . import fe
from .geometry import DomainSpec, inside
from .intergrid import CrossEvalCache, LocationError
from .mesh import MeshForest

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]

ELEMENT_PAIRS = {
    "Q1-(Q1+B)-P0": (fe.ElementKind.Q1, fe.ElementKind.Q1B),
    "Q2-Q2-P0": (fe.ElementKind.Q2, fe.ElementKind.Q2),
}


class ConfigurationError(ValueError):
    pass


def constant(c: float) -> Field:
    def fn(x, y):
        return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, float(c))

    fn.constant_value = float(c)
    return fn


class ExactSolution(NamedTuple):
    """Exact fields; ``u`` is the extension to all of Omega (equal to u2 on Omega_2)."""

    u: Field
    grad_u: Callable
    u2: Field
    grad_u2: Callable


@dataclass
class ProblemSpec:
    background: DomainSpec
    immersed: DomainSpec
    beta: Field
    beta2: Field
    f: Field
    f2: Field
    element_pair: str = "Q1-(Q1+B)-P0"
    exact: ExactSolution | None = None
    dirichlet: Field | None = None
    beta_grad: Callable | None = None
    beta2_grad: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        if self.element_pair not in ELEMENT_PAIRS:
            raise ConfigurationError(
                f"unknown element pair {self.element_pair!r}; choose from {sorted(ELEMENT_PAIRS)}"
            )

    @property
    def kinds(self) -> tuple[fe.ElementKind, fe.ElementKind]:
        return ELEMENT_PAIRS[self.element_pair]

    def beta3(self, x, y):
        return self.beta2(x, y) - self.beta(x, y)

    def f3(self, x, y):
        return self.f2(x, y) - self.f(x, y)

    def check_coefficients(self, n: int = 10_000, seed: int = 0):
        """Sample positivity of beta and beta2; warn where beta2 <= beta."""
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = self.background.bounds
        p = rng.uniform((x0, y0), (x1, y1), size=(n, 2))
        if np.any(self.beta(p[:, 0], p[:, 1]) <= 0):
            raise ConfigurationError("beta must be bounded below by a positive constant")
        q = p[inside(self.immersed, p)]
        if len(q):
            if np.any(self.beta2(q[:, 0], q[:, 1]) <= 0):
                raise ConfigurationError("beta2 must be bounded below by a positive constant")
            if np.any(self.beta3(q[:, 0], q[:, 1]) <= 0):
                warnings.warn(
                    "beta2 <= beta somewhere in the immersed domain; the discrete "
                    "stability proof does not cover this case",
                    stacklevel=2,
                )


@dataclass
class Discretization:
    """Forests, DoF layouts and the cross-mesh cache for one mesh pair."""

    problem: ProblemSpec
    forest1: MeshForest
    forest2: MeshForest
    cache: CrossEvalCache = field(default_factory=CrossEvalCache)

    def __post_init__(self):
        self.rebuild()

    def rebuild(self):
        k1, k2 = self.problem.kinds
        if not self.forest2.active_cells:
            raise ConfigurationError("immersed mesh has no cells")
        self.layout1 = fe.build_dof_layout(self.forest1, k1, dirichlet_boundary=True)
        self.layout2 = fe.build_dof_layout(self.forest2, k2)
        self.layout_l = fe.build_dof_layout(self.forest2, fe.ElementKind.P0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.layout1.n_free, self.layout2.n_free, self.layout_l.n_dofs

    def coupling(self):
        try:
            return self.cache.coupling(self.forest1, self.forest2)
        except LocationError as err:
            raise ConfigurationError(f"immersed domain is not inside the background: {err}") from err


@dataclass
class RawBlocks:
    """Blocks before constraint condensation and Dirichlet elimination."""

    A: sp.csr_matrix
    A2: sp.csr_matrix
    C: sp.csr_matrix
    M: sp.csr_matrix
    F: np.ndarray
    F2: np.ndarray
    mass2: sp.csr_matrix


@dataclass
class BlockSystem:
    """Reduced blocks acting on free DoFs.

    ``G`` is the third-block right-hand side; it is nonzero only with
    inhomogeneous Dirichlet data (it carries -C g).
    """

    A: sp.csr_matrix
    A2: sp.csr_matrix
    C: sp.csr_matrix
    M: sp.csr_matrix
    F: np.ndarray
    F2: np.ndarray
    G: np.ndarray
    mass2: sp.csr_matrix
    raw: RawBlocks
    dirichlet_values: np.ndarray
    cell_areas: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.A2.shape[0], self.C.shape[0]

    def matrix(self) -> sp.csc_matrix:
        return sp.bmat(
            [[self.A, None, self.C.T], [None, self.A2, -self.M.T], [self.C, -self.M, None]],
            format="csc",
        )

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.F, self.F2, self.G])

    def split(self, x):
        n1, n2, _ = self.dims
        return x[:n1], x[n1:n1 + n2], x[n1 + n2:]


def _stiffness_and_load(layout, forest, coef, load, rule, with_mass=False):
    ids = layout.cell_ids
    X = forest.cell_vertices(ids)
    x, J, det = fe.map_cells(X, rule.points)
    if np.any(det <= 0):
        raise fe.InvertedCellError("mesh contains a cell with non-positive Jacobian")
    Jinv = fe.inverse_jacobians(J, det)
    dphi = fe.shape_gradients(layout.kind, rule.points)  # (q,nb,2)
    grad = np.einsum("qba,nqai->nqbi", dphi, Jinv)
    wdet = det * rule.weights
    c = coef(x[..., 0], x[..., 1])
    Ke = np.einsum("nq,nqbi,nqci->nbc", wdet * c, grad, grad)
    phi = fe.shape_values(layout.kind, rule.points)  # (q,nb)
    fe_ = np.einsum("nq,qb->nb", wdet * load(x[..., 0], x[..., 1]), phi)
    dofs = layout.cell_to_dofs
    nb = dofs.shape[1]
    rows = np.repeat(dofs, nb, axis=1).ravel()
    cols = np.tile(dofs, (1, nb)).ravel()
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(layout.n_dofs, layout.n_dofs))
    F = np.bincount(dofs.ravel(), weights=fe_.ravel(), minlength=layout.n_dofs)
    if not with_mass:
        return K, F
    Me = np.einsum("nq,qb,qc->nbc", wdet, phi, phi)
    Mass = sp.csr_matrix((Me.ravel(), (rows, cols)), shape=(layout.n_dofs, layout.n_dofs))
    return K, F, Mass


def _coupling_blocks(disc: Discretization):
    """C (multiplier x background) and M (multiplier x immersed), unreduced."""
    cp = disc.coupling()
    lay1, lay2, lay_l = disc.layout1, disc.layout2, disc.layout_l
    n_c, q = cp.wdet.shape
    lrow = lay_l.row_of(cp.cell_ids)
    mult = lay_l.cell_to_dofs[lrow, 0]

    rows1 = lay1.row_of(cp.bg_cells.ravel())
    phi1 = fe.shape_values(lay1.kind, cp.bg_ref.reshape(-1, 2))  # (n*q, nb1)
    vals = (cp.wdet.reshape(-1, 1) * phi1).ravel()
    cols = lay1.cell_to_dofs[rows1].ravel()
    nb1 = phi1.shape[1]
    r = np.repeat(np.repeat(mult, q), nb1)
    C = sp.csr_matrix((vals, (r, cols)), shape=(lay_l.n_dofs, lay1.n_dofs))

    rule = fe.quadrature(lay2.kind, "coupling")
    phi2 = fe.shape_values(lay2.kind, rule.points)  # (q,nb2)
    Me = cp.wdet @ phi2  # (n,nb2)
    rows2 = lay2.row_of(cp.cell_ids)
    cols2 = lay2.cell_to_dofs[rows2]
    M = sp.csr_matrix(
        (Me.ravel(), (np.repeat(mult, cols2.shape[1]), cols2.ravel())),
        shape=(lay_l.n_dofs, lay2.n_dofs),
    )
    areas = np.zeros(lay_l.n_dofs)
    areas[mult] = cp.wdet.sum(axis=1)
    return C, M, areas


def assemble_raw(disc: Discretization) -> tuple[RawBlocks, np.ndarray]:
    pb = disc.problem
    k1, k2 = pb.kinds
    A, F = _stiffness_and_load(disc.layout1, disc.forest1, pb.beta, pb.f, fe.quadrature(k1, "cell"))
    A2, F2, mass2 = _stiffness_and_load(
        disc.layout2, disc.forest2, pb.beta3, pb.f3, fe.quadrature(k2, "cell"), with_mass=True
    )
    C, M, areas = _coupling_blocks(disc)
    return RawBlocks(A, A2, C, M, F, F2, mass2), areas


def dirichlet_data(disc: Discretization) -> np.ndarray:
    lay = disc.layout1
    g = disc.problem.dirichlet
    if g is None or len(lay.dirichlet) == 0:
        return np.zeros(len(lay.dirichlet))
    p = lay.node_points[lay.dirichlet]
    return np.asarray(g(p[:, 0], p[:, 1]), dtype=float)


def assemble(disc: Discretization) -> BlockSystem:
    """Assemble, condense hanging-node constraints and eliminate Dirichlet DoFs."""
    raw, areas = assemble_raw(disc)
    P1, P2 = disc.layout1.P, disc.layout2.P
    gvals = dirichlet_data(disc)
    g_full = disc.layout1.Pd @ gvals if len(gvals) else np.zeros(disc.layout1.n_dofs)
    A = (P1.T @ raw.A @ P1).tocsr()
    F = P1.T @ (raw.F - raw.A @ g_full)
    C = (raw.C @ P1).tocsr()
    G = -(raw.C @ g_full)
    A2 = (P2.T @ raw.A2 @ P2).tocsr()
    F2 = P2.T @ raw.F2
    M = (raw.M @ P2).tocsr()
    mass2 = (P2.T @ raw.mass2 @ P2).tocsr()
    return BlockSystem(A, A2, C, M, F, F2, G, mass2, raw, gvals, areas)


class BlockResidual(NamedTuple):
    r1: float
    r2: float
    r3: float


def residual(system: BlockSystem, u, u2, lam) -> BlockResidual:
    """Euclidean norms of the three block residuals (free-DoF vectors)."""
    r1 = system.F - system.A @ u - system.C.T @ lam
    r2 = system.F2 - system.A2 @ u2 + system.M.T @ lam
    r3 = system.G - system.C @ u + system.M @ u2
    return BlockResidual(*(float(np.linalg.norm(r)) for r in (r1, r2, r3)))


def interpolate(layout: fe.DofLayout, fn: Field) -> np.ndarray:
    """Nodal interpolant; bubble DoFs 0, hanging DoFs from their masters."""
    p = layout.node_points
    u = np.zeros(layout.n_dofs)
    ok = ~np.isnan(p[:, 0])
    u[ok] = fn(p[ok, 0], p[ok, 1])
    return layout.distribute(u)
