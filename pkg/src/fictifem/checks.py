"""Invariant checks shared by the ``check`` command and the test-suite."""
from __future__ import annotations

import numpy as np

from . import fe, harness
from .adapt import doerfler_mark
from .assembly import Discretization, assemble
from .geometry import initial_mesh
from .mesh import edge_arrays, inverse_map, refine_cells, structured_forest
from .solver import solve_state

Q1_UNIT_STIFFNESS = np.array(
    [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]], dtype=float
) / 6.0


def hanging_node_jumps(forest, layout, coeffs, n_points=20, rng=None) -> np.ndarray:
    """|u(minus side) - u(plus side)| at random points of nonconforming edges."""
    rng = np.random.default_rng(rng)
    p0, p1, minus, plus, conforming = edge_arrays(forest)
    idx = np.nonzero(~conforming)[0]
    if len(idx) == 0:
        return np.zeros(0)
    pick = idx[rng.integers(0, len(idx), n_points)]
    t = rng.uniform(0.0, 1.0, n_points)[:, None]
    pts = (1 - t) * p0[pick] + t * p1[pick]
    vals = []
    for cells in (minus[pick], plus[pick]):
        X = forest.cell_vertices(cells)
        ref = inverse_map(X, pts)
        v, _ = fe.evaluate_at(layout, X, layout.row_of(cells), ref, coeffs, gradients=False)
        vals.append(v)
    return np.abs(vals[0] - vals[1])


def constraint_defect(state) -> float:
    """max over immersed cells of |cell average of u_h - u_2h| (coupling quadrature)."""
    raw = state.system.raw
    areas = state.system.cell_areas
    gap = raw.C @ state.u - raw.M @ state.u2
    return float(np.max(np.abs(gap / areas)))


def exact_solution_residuals(preset, n=10_000, rng=0, h=0.5) -> dict:
    """Strong-form residuals of a circle preset's exact pair.

    The solutions are quadratic, so centred second differences with any step
    are exact up to rounding; evaluation runs in extended precision so that
    the rounding stays far below the tolerance even for beta2 = 1000.
    """
    rng = np.random.default_rng(rng)
    ld = np.longdouble
    pb = preset.problem
    ex = pb.exact
    r = np.sqrt(rng.uniform(0, 1, n))
    th = rng.uniform(0, 2 * np.pi, n)
    xi, yi = ld(r * np.cos(th)), ld(r * np.sin(th))
    x0, x1, y0, y1 = pb.background.bounds
    xo, yo = rng.uniform(x0, x1, 4 * n), rng.uniform(y0, y1, 4 * n)
    keep = xo**2 + yo**2 > 1.0
    xo, yo = ld(xo[keep][:n]), ld(yo[keep][:n])

    def lap(u, x, y):
        return (u(x + h, y) + u(x - h, y) + u(x, y + h) + u(x, y - h) - 4 * u(x, y)) / h**2

    b, b2 = pb.beta(0.0, 0.0), pb.beta2(0.0, 0.0)
    out = {
        "pde_outer": float(np.max(np.abs(-b * lap(preset.u1, xo, yo) - pb.f(xo, yo)))),
        "pde_inner": float(np.max(np.abs(-b2 * lap(ex.u2, xi, yi) - pb.f2(xi, yi)))),
    }
    t = ld(rng.uniform(0, 2 * np.pi, n))
    gx, gy = np.cos(t), np.sin(t)
    out["continuity"] = float(np.max(np.abs(preset.u1(gx, gy) - ex.u2(gx, gy))))
    n2 = np.stack([gx, gy], axis=-1)  # outward from the immersed domain
    flux = b * np.sum(preset.grad_u1(gx, gy) * -n2, axis=-1) + b2 * np.sum(ex.grad_u2(gx, gy) * n2, axis=-1)
    out["flux"] = float(np.max(np.abs(flux)))
    xb = np.concatenate([np.full(n // 4, x0), np.full(n // 4, x1), rng.uniform(x0, x1, n // 2)])
    yb = np.concatenate([rng.uniform(y0, y1, n // 2), np.full(n // 4, y0), np.full(n // 4, y1)])
    out["dirichlet"] = float(np.max(np.abs(pb.dirichlet(xb, yb) - preset.u1(xb, yb))))
    return out


def _check_q1_stiffness():
    f = structured_forest(0, 1, 0, 1, 1, 1)
    lay = fe.build_dof_layout(f, fe.ElementKind.Q1)
    rule = fe.quadrature(fe.ElementKind.Q1)
    from .assembly import _stiffness_and_load, constant

    K, _ = _stiffness_and_load(lay, f, constant(1.0), constant(0.0), rule)
    loc = lay.cell_to_dofs[0]
    err = np.abs(K.toarray()[np.ix_(loc, loc)] - Q1_UNIT_STIFFNESS).max()
    assert err < 1e-14, f"unit stiffness off by {err}"


def _check_doerfler():
    rng = np.random.default_rng(0)
    for _ in range(20):
        eta = rng.random(rng.integers(1, 200))
        m = doerfler_mark(eta, 0.6)
        s = np.sum(eta[m] ** 2)
        assert s >= 0.36 * np.sum(eta**2)
        assert s - np.min(eta[m]) ** 2 < 0.36 * np.sum(eta**2)


def _small_state(name="circle_10", pair="Q1-(Q1+B)-P0"):
    p = harness.get_preset(name, pair)
    d = Discretization(p.problem, initial_mesh(p.problem.background, 2), initial_mesh(p.problem.immersed, 1))
    return p, solve_state(d)


def _check_constraint():
    _, s = _small_state()
    defect = constraint_defect(s)
    assert defect <= 1e-8 * (1 + np.abs(s.u).max()), f"constraint defect {defect}"


def _check_hanging_nodes():
    for kind in (fe.ElementKind.Q1, fe.ElementKind.Q2):
        f = structured_forest(0, 1, 0, 1, 2, 2)
        refine_cells(f, [f.active_ids()[0]])
        lay = fe.build_dof_layout(f, kind)
        u = lay.distribute(np.random.default_rng(1).standard_normal(lay.n_dofs))
        jumps = hanging_node_jumps(f, lay, u, 20, rng=2)
        assert jumps.max() < 1e-12, f"{kind.name} jump {jumps.max()}"


def _check_exact_solutions():
    for name in ("circle_10", "circle_1000", "circle_reversed"):
        res = exact_solution_residuals(harness.get_preset(name), n=1000)
        bad = {k: v for k, v in res.items() if v > 1e-12}
        assert not bad, f"{name}: {bad}"


def _check_assembly_residual():
    _, s = _small_state()
    r = s.report.residuals
    assert max(r) < 1e-9 * (1 + np.linalg.norm(s.system.rhs())), f"residuals {r}"
    assert abs(assemble(s.disc).A.sum() - s.system.A.sum()) < 1e-12


CHECKS = [
    ("Q1 unit-cell stiffness", _check_q1_stiffness),
    ("bulk marking minimality", _check_doerfler),
    ("hanging-node continuity", _check_hanging_nodes),
    ("discrete coupling constraint", _check_constraint),
    ("saddle system residual", _check_assembly_residual),
    ("circle exact solutions", _check_exact_solutions),
]
