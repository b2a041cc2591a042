"""Residual-based a posteriori error indicators on both meshes.

Background cell K1:
    eta^2 = h_K^2 ||beta Lap u_h - lam~ + P0 f||^2 + 1/2 sum_E h_E ||beta [d_n u_h]||^2
Immersed cell K2:
    eta^2 = h_K^2 ||beta3 Lap u_2h + lam + P0 f3||^2 + ||u_h - u_2h||_{1,K}^2
            + 1/2 sum_E h_E ||beta3 [d_n u_2h]||^2 + sum_{E on Gamma} h_E ||beta3 d_n u_2h||^2

h_K is the longer cell diagonal and h_E the edge length.  lam~ is the zero
extension of the multiplier to the background.  In smooth-coefficient mode
the coefficients in the residuals are replaced by their cell means and the
remainders move into the oscillation terms.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import fe
from .intergrid import eval_located, eval_multiplier
from .mesh import boundary_edge_arrays, edge_arrays, inverse_map


class CoefficientMode(enum.Enum):
    CONSTANT = "constant"
    SMOOTH = "smooth"


@dataclass
class IndicatorField:
    """Per-cell squared contributions; ``eta`` and ``osc`` are their roots.

    ``edge_terms`` holds the full h_E ||R_E||^2 of every interior edge (in the
    order of ``mesh.edge_arrays``) for bookkeeping checks.
    """

    cell_ids: np.ndarray
    element: np.ndarray
    interior_edge: np.ndarray
    interface_edge: np.ndarray
    restriction: np.ndarray
    osc_sq: np.ndarray
    edge_terms: np.ndarray

    @property
    def eta_sq(self) -> np.ndarray:
        return self.element + self.interior_edge + self.interface_edge + self.restriction

    @property
    def eta(self) -> np.ndarray:
        return np.sqrt(self.eta_sq)

    @property
    def osc(self) -> np.ndarray:
        return np.sqrt(self.osc_sq)

    @property
    def total(self) -> float:
        return float(np.sqrt(self.eta_sq.sum()))

    @property
    def osc_total(self) -> float:
        return float(np.sqrt(self.osc_sq.sum()))

    def __len__(self):
        return len(self.cell_ids)


def _mode(mode) -> CoefficientMode:
    return mode if isinstance(mode, CoefficientMode) else CoefficientMode(mode)


def is_constant_field(fn, bounds, n: int = 64, seed: int = 1) -> bool:
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = bounds
    p = rng.uniform((x0, y0), (x1, y1), size=(n, 2))
    v = np.asarray(fn(p[:, 0], p[:, 1]), dtype=float)
    return bool(np.all(v == v[0]))


def check_mode(problem, mode):
    if _mode(mode) is CoefficientMode.CONSTANT:
        b = problem.background.bounds
        if not (is_constant_field(problem.beta, b) and is_constant_field(problem.beta2, b)):
            raise ValueError("constant mode needs constant beta and beta2; use smooth mode")


def project_p0(fn, X, rule: fe.QuadratureRule | None = None) -> np.ndarray:
    """Cell means of ``fn`` over cells ``X`` (n,4,2) (one cell: shape (4,2))."""
    rule = rule or fe.gauss_tensor(3)
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    X = X.reshape(-1, 4, 2)
    x, _, det = fe.map_cells(X, rule.points)
    wdet = det * rule.weights
    vals = np.asarray(fn(x[..., 0], x[..., 1]), dtype=float) * np.ones_like(wdet)
    out = (wdet * vals).sum(axis=1) / wdet.sum(axis=1)
    return float(out[0]) if single else out


def _numeric_gradient(fn, x, y, h=1e-6):
    gx = (fn(x + h, y) - fn(x - h, y)) / (2 * h)
    gy = (fn(x, y + h) - fn(x, y - h)) / (2 * h)
    return np.stack([gx * np.ones_like(x), gy * np.ones_like(x)], axis=-1)


def _gradient_of(fn, grad_fn, x, y):
    if grad_fn is not None:
        g = np.asarray(grad_fn(x, y), dtype=float)
        return g if g.shape[-1] == 2 and g.shape[:-1] == np.shape(x) else np.moveaxis(g, 0, -1)
    return _numeric_gradient(fn, x, y)


# -- cell data ---------------------------------------------------------------------


class _CellEval:
    """FE values, gradients and Laplacians at cell quadrature points."""

    def __init__(self, forest, layout, coeffs, rule):
        self.ids = layout.cell_ids
        self.X = forest.cell_vertices(self.ids)
        self.rule = rule
        self.x, _, det = fe.map_cells(self.X, rule.points)
        self.wdet = det * rule.weights
        self.area = self.wdet.sum(axis=1)
        rows = np.arange(len(self.ids))
        self.val, self.grad, self.lap = fe.evaluate_on_cells(
            layout, self.X, rows, rule.points, coeffs, laplacian=True
        )
        self.h = forest.diameters(self.ids)

    def at(self, fn):
        return np.asarray(fn(self.x[..., 0], self.x[..., 1]), dtype=float) * np.ones_like(self.wdet)

    def mean(self, vals):
        return (self.wdet * vals).sum(axis=1) / self.area

    def norm_sq(self, vals):
        return (self.wdet * vals**2).sum(axis=1)


def _coef_pair(ev, fn, mode):
    """Coefficient used in the residual and its remainder (fn - coefficient)."""
    full = ev.at(fn)
    if mode is CoefficientMode.CONSTANT:
        return full, np.zeros_like(full)
    mean = ev.mean(full)[:, None] * np.ones_like(full)
    return mean, full - mean


def element_residual_1(state, mode=CoefficientMode.CONSTANT, _ev=None) -> np.ndarray:
    """||beta Lap u_h - lam~ + P0 f||_{0,K} for every background cell."""
    mode = _mode(mode)
    d = state.disc
    pb = d.problem
    ev = _ev or _CellEval(d.forest1, d.layout1, state.u, fe.quadrature(d.layout1.kind, "cell"))
    coef, _ = _coef_pair(ev, pb.beta, mode)
    lam_t = eval_multiplier(d.forest2, state.lam, ev.x.reshape(-1, 2), pb.immersed,
                            d.layout_l, fill_sliver=True).reshape(ev.wdet.shape)
    pf = ev.mean(ev.at(pb.f))[:, None]
    return np.sqrt(ev.norm_sq(coef * ev.lap - lam_t + pf))


def element_residual_2(state, mode=CoefficientMode.CONSTANT, _ev=None) -> np.ndarray:
    """||beta3 Lap u_2h + lam + P0 f3||_{0,K} for every immersed cell."""
    mode = _mode(mode)
    d = state.disc
    pb = d.problem
    ev = _ev or _CellEval(d.forest2, d.layout2, state.u2, fe.quadrature(d.layout2.kind, "cell"))
    coef, _ = _coef_pair(ev, pb.beta3, mode)
    lam = state.lam[d.layout_l.cell_to_dofs[:, 0]][:, None]
    pf = ev.mean(ev.at(pb.f3))[:, None]
    return np.sqrt(ev.norm_sq(coef * ev.lap + lam + pf))


# -- edge data ---------------------------------------------------------------------


def _edge_points(p0, p1, rule):
    t = rule.points
    pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
    L = np.linalg.norm(p1 - p0, axis=1)
    tang = (p1 - p0) / L[:, None]
    normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    return pts, L, normal


def _grad_in_cells(forest, layout, coeffs, cells, pts):
    """Gradients (n,q,2) of a FE function restricted to ``cells`` (n,) at ``pts`` (n,q,2)."""
    n, q, _ = pts.shape
    cells_q = np.repeat(cells, q)
    X = forest.cell_vertices(cells_q)
    ref = inverse_map(X, pts.reshape(-1, 2))
    ref = np.clip(ref, 0.0, 1.0)
    rows = layout.row_of(cells_q)
    _, g = fe.evaluate_at(layout, X, rows, ref, coeffs)
    return g.reshape(n, q, 2)


def _cell_means(forest, layout, fn, rule):
    X = forest.cell_vertices(layout.cell_ids)
    return project_p0(fn, X, rule) if len(X) else np.zeros(0)


def _interior_jumps(forest, layout, coeffs, coef_fn, mode, rule):
    """Per interior edge: (residual density, coefficient-remainder density, L, minus row, plus row)."""
    p0, p1, mi, pl, _ = edge_arrays(forest)
    if len(mi) == 0:
        z = np.zeros((0, len(rule)))
        return z, z, np.zeros(0), mi, pl
    pts, L, normal = _edge_points(p0, p1, rule)
    gm = _grad_in_cells(forest, layout, coeffs, mi, pts)
    gp = _grad_in_cells(forest, layout, coeffs, pl, pts)
    dn_m = np.einsum("nqi,ni->nq", gm, normal)
    dn_p = np.einsum("nqi,ni->nq", gp, normal)
    full = np.asarray(coef_fn(pts[..., 0], pts[..., 1]), dtype=float) * np.ones_like(dn_m)
    rm, rp = layout.row_of(mi), layout.row_of(pl)
    if mode is CoefficientMode.CONSTANT:
        jump = full * (dn_m - dn_p)
        rem = np.zeros_like(jump)
    else:
        means = _cell_means(forest, layout, coef_fn, fe.quadrature(layout.kind, "cell"))
        cm, cp = means[rm][:, None], means[rp][:, None]
        jump = cm * dn_m - cp * dn_p
        rem = (full - cm) * dn_m - (full - cp) * dn_p
    return jump, rem, L, rm, rp


def _edge_norm_sq(dens, L, rule):
    """||dens||^2_{0,E} per edge of length L."""
    return L * (dens**2 @ rule.weights)


def _weighted_edge_sq(dens, L, rule):
    """h_E ||dens||^2_{0,E} with h_E = L."""
    return L * _edge_norm_sq(dens, L, rule)


def edge_residual_1(state, mode=CoefficientMode.CONSTANT) -> np.ndarray:
    """||beta [d_n u_h]||_{0,E} per interior background edge (mesh.edge_arrays order)."""
    mode = _mode(mode)
    d = state.disc
    rule = fe.quadrature(d.layout1.kind, "edge")
    jump, _, L, _, _ = _interior_jumps(d.forest1, d.layout1, state.u, d.problem.beta, mode, rule)
    return np.sqrt(_edge_norm_sq(jump, L, rule))


def edge_residual_2(state, mode=CoefficientMode.CONSTANT):
    """Immersed-mesh edge residual norms: (interior edges, interface edges).

    Interface edges come in ``mesh.boundary_edge_arrays`` order and carry
    the one-sided conormal derivative beta3 d_n u_2h with outward normal.
    """
    mode = _mode(mode)
    d = state.disc
    rule = fe.quadrature(d.layout2.kind, "edge")
    jump, _, L, _, _ = _interior_jumps(d.forest2, d.layout2, state.u2, d.problem.beta3, mode, rule)
    gam, _, Lg, _ = _interface_terms(state, mode, rule)
    return np.sqrt(_edge_norm_sq(jump, L, rule)), np.sqrt(_edge_norm_sq(gam, Lg, rule))


def _interface_terms(state, mode, rule):
    d = state.disc
    forest, layout = d.forest2, d.layout2
    p0, p1, cells = boundary_edge_arrays(forest)
    if len(cells) == 0:
        z = np.zeros((0, len(rule)))
        return z, z, np.zeros(0), layout.row_of(cells)
    pts, L, normal = _edge_points(p0, p1, rule)
    rows = layout.row_of(cells)
    centroid = forest.cell_vertices(cells).mean(axis=1)
    flip = np.einsum("ni,ni->n", 0.5 * (p0 + p1) - centroid, normal) < 0
    normal[flip] *= -1
    g = _grad_in_cells(forest, layout, state.u2, cells, pts)
    dn = np.einsum("nqi,ni->nq", g, normal)
    full = np.asarray(d.problem.beta3(pts[..., 0], pts[..., 1]), dtype=float) * np.ones_like(dn)
    if mode is CoefficientMode.CONSTANT:
        return full * dn, np.zeros_like(dn), L, rows
    means = _cell_means(forest, layout, d.problem.beta3, fe.quadrature(layout.kind, "cell"))
    cm = means[rows][:, None]
    return cm * dn, (full - cm) * dn, L, rows


def restriction_term(state) -> np.ndarray:
    """||u_h - u_2h||_{1,K2}^2 per immersed cell by cross-mesh quadrature."""
    d = state.disc
    cp = d.coupling()
    val1, grad1 = eval_located(d.layout1, d.forest1, state.u, cp.bg_cells, cp.bg_ref)
    rule = fe.quadrature(fe.ElementKind.P0, "coupling")
    X2 = d.forest2.cell_vertices(cp.cell_ids)
    val2, grad2 = fe.evaluate_on_cells(d.layout2, X2, d.layout2.row_of(cp.cell_ids), rule.points, state.u2)
    n, q = cp.wdet.shape
    dv = val1.reshape(n, q) - val2
    dg = grad1.reshape(n, q, 2) - grad2
    dens = dv**2 + np.sum(dg**2, axis=-1)
    out = np.zeros(len(d.layout2.cell_ids))
    out[d.layout2.row_of(cp.cell_ids)] = (cp.wdet * dens).sum(axis=1)
    return out


# -- assembled indicators -------------------------------------------------------------


def _coef_oscillation(ev, coef_fn, grad_fn, mode):
    """h_K^2 ||div((c - P0 c) grad v)||^2 per cell (zero in constant mode)."""
    if mode is CoefficientMode.CONSTANT:
        return np.zeros(len(ev.h))
    _, rem = _coef_pair(ev, coef_fn, mode)
    gc = _gradient_of(coef_fn, grad_fn, ev.x[..., 0], ev.x[..., 1])
    div = np.einsum("nqi,nqi->nq", gc, ev.grad) + rem * ev.lap
    return ev.h**2 * ev.norm_sq(div)


def _accumulate(n, rows, vals, weight):
    out = np.zeros(n)
    np.add.at(out, rows, weight * vals)
    return out


def indicators(state, mode=CoefficientMode.CONSTANT) -> tuple[IndicatorField, IndicatorField]:
    """Indicator fields on the background and immersed meshes."""
    mode = _mode(mode)
    d = state.disc
    pb = d.problem
    check_mode(pb, mode)

    # background mesh
    lay1 = d.layout1
    ev1 = _CellEval(d.forest1, lay1, state.u, fe.quadrature(lay1.kind, "cell"))
    n1 = len(lay1.cell_ids)
    el1 = ev1.h**2 * element_residual_1(state, mode, ev1) ** 2
    rule1 = fe.quadrature(lay1.kind, "edge")
    jump, rem, L, rm, rp = _interior_jumps(d.forest1, lay1, state.u, pb.beta, mode, rule1)
    et1 = _weighted_edge_sq(jump, L, rule1)
    ie1 = _accumulate(n1, rm, et1, 0.5) + _accumulate(n1, rp, et1, 0.5)
    osc_e1 = _weighted_edge_sq(rem, L, rule1)
    force1 = ev1.h**2 * ev1.norm_sq(ev1.at(pb.f) - ev1.mean(ev1.at(pb.f))[:, None])
    osc1 = (force1 + _coef_oscillation(ev1, pb.beta, pb.beta_grad, mode)
            + _accumulate(n1, rm, osc_e1, 0.5) + _accumulate(n1, rp, osc_e1, 0.5))
    field1 = IndicatorField(lay1.cell_ids, el1, ie1, np.zeros(n1), np.zeros(n1), osc1, et1)

    # immersed mesh
    lay2 = d.layout2
    ev2 = _CellEval(d.forest2, lay2, state.u2, fe.quadrature(lay2.kind, "cell"))
    n2 = len(lay2.cell_ids)
    el2 = ev2.h**2 * element_residual_2(state, mode, ev2) ** 2
    rule2 = fe.quadrature(lay2.kind, "edge")
    jump, rem, L, rm, rp = _interior_jumps(d.forest2, lay2, state.u2, pb.beta3, mode, rule2)
    et2 = _weighted_edge_sq(jump, L, rule2)
    ie2 = _accumulate(n2, rm, et2, 0.5) + _accumulate(n2, rp, et2, 0.5)
    osc_e2 = _weighted_edge_sq(rem, L, rule2)
    gam, grem, Lg, rg = _interface_terms(state, mode, rule2)
    gf2 = _accumulate(n2, rg, _weighted_edge_sq(gam, Lg, rule2), 1.0)
    f3 = ev2.at(pb.f3)
    force2 = ev2.h**2 * ev2.norm_sq(f3 - ev2.mean(f3)[:, None])
    beta3_grad = None
    if pb.beta_grad is not None and pb.beta2_grad is not None:
        def beta3_grad(x, y):
            return _gradient_of(pb.beta2, pb.beta2_grad, x, y) - _gradient_of(pb.beta, pb.beta_grad, x, y)
    osc2 = (force2 + _coef_oscillation(ev2, pb.beta3, beta3_grad, mode)
            + _accumulate(n2, rm, osc_e2, 0.5) + _accumulate(n2, rp, osc_e2, 0.5)
            + _accumulate(n2, rg, _weighted_edge_sq(grem, Lg, rule2), 1.0))
    field2 = IndicatorField(lay2.cell_ids, el2, ie2, gf2, restriction_term(state), osc2, et2)
    return field1, field2


def oscillations(state, mode=CoefficientMode.CONSTANT) -> tuple[np.ndarray, np.ndarray]:
    f1, f2 = indicators(state, mode)
    return f1.osc, f2.osc
