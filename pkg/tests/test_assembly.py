import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from fictifem import fe, geometry as G
from fictifem.assembly import (
    ConfigurationError, Discretization, ProblemSpec, _stiffness_and_load, assemble, assemble_raw,
    constant, interpolate, residual,
)
from fictifem.checks import Q1_UNIT_STIFFNESS, constraint_defect
from fictifem.fe import ElementKind as EK
from fictifem.mesh import refine_cells, structured_forest
from fictifem.solver import solve_state


def toy(pair="Q1-(Q1+B)-P0", f=1.0, f2=1.0, beta=1.0, beta2=4.0, levels=(2, 1), bg=(0, 2), im=(0.5, 1.5)):
    pb = ProblemSpec(G.rectangle(bg[0], bg[1], bg[0], bg[1]), G.square(*im), constant(beta),
                     constant(beta2), constant(f), constant(f2), pair)
    return Discretization(pb, G.initial_mesh(pb.background, levels[0]), G.initial_mesh(pb.immersed, levels[1]))


def test_unit_cell_stiffness():
    f = structured_forest(0, 1, 0, 1, 1, 1)
    lay = fe.build_dof_layout(f, EK.Q1)
    K, F = _stiffness_and_load(lay, f, constant(1.0), constant(0.0), fe.quadrature(EK.Q1))
    loc = lay.cell_to_dofs[0]
    assert np.abs(K.toarray()[np.ix_(loc, loc)] - Q1_UNIT_STIFFNESS).max() <= 1e-14
    assert np.all(F == 0)


def test_zero_forcing_gives_zero_loads():
    raw, _ = assemble_raw(toy(f=0.0, f2=0.0))
    assert np.all(raw.F == 0) and np.all(raw.F2 == 0)


@pytest.mark.parametrize("levels", [(2, 0), (3, 2)])
def test_m_rows_against_ones_give_areas(levels):
    d = toy(levels=levels)
    raw, areas = assemble_raw(d)
    lay2 = d.layout2
    ones = np.zeros(lay2.n_dofs)
    vertex = ~np.isnan(lay2.node_points[:, 0])
    ones[vertex] = 1.0
    # the bubble column integrates to 4/9 of the (affine) cell area
    row = raw.M @ ones
    assert np.allclose(row, areas, atol=1e-13)
    bub = lay2.cell_to_dofs[:, 4]
    lrow = d.layout_l.cell_to_dofs[:, 0]
    assert np.allclose(raw.M.toarray()[lrow, bub], 4 / 9 * d.forest2.areas(lay2.cell_ids))


def test_symmetry_and_constant_kernel():
    d = toy(levels=(3, 2))
    refine_cells(d.forest1, d.forest1.active_ids()[:5])
    refine_cells(d.forest2, d.forest2.active_ids()[:3])
    d.rebuild()
    s = assemble(d)
    for K in (s.A, s.A2, s.raw.A, s.raw.A2):
        assert abs(K - K.T).max() <= 1e-13 * abs(K).max()
    one = interpolate(d.layout2, constant(1.0))  # bubbles 0, hanging nodes 1
    assert np.abs(s.raw.A2 @ one).max() <= 1e-12
    assert np.abs(s.A2 @ one[d.layout2.free]).max() <= 1e-12


def test_residual_examples():
    s = assemble(toy(f=0.0, f2=0.0))
    n1, n2, m = s.dims
    assert residual(s, np.zeros(n1), np.zeros(n2), np.zeros(m)) == (0.0, 0.0, 0.0)
    s = assemble(toy())
    x = np.linalg.solve(s.matrix().toarray(), s.rhs())
    assert sum(s.dims) <= 300
    assert max(residual(s, *s.split(x))) <= 1e-9 * (1 + np.linalg.norm(s.rhs()))
    x2 = x.copy()
    x2[0] += 1.0
    K = s.matrix().toarray()
    r = np.abs(np.array(residual(s, *s.split(x2))))
    col = K[:, 0]
    want = [np.linalg.norm(col[:n1]), np.linalg.norm(col[n1:n1 + n2]), np.linalg.norm(col[n1 + n2:])]
    assert np.allclose(r, want, atol=1e-9)


def test_interpolate_examples():
    f = structured_forest(0, 1, 0, 1, 3, 3)
    refine_cells(f, [0, 4])
    lay = fe.build_dof_layout(f, EK.Q1)
    assert np.allclose(interpolate(lay, constant(1.0)), 1.0)
    u = interpolate(lay, lambda x, y: x + y)
    rng = np.random.default_rng(0)
    ids = rng.choice(f.active_ids(), 100)
    ref = rng.uniform(0, 1, (100, 2))
    X = f.cell_vertices(ids)
    v, _ = fe.evaluate_at(lay, X, lay.row_of(ids), ref, u, gradients=False)
    x = np.einsum("nb,nbi->ni", fe.shape_values(EK.Q1, ref), X)
    assert np.allclose(v, x.sum(axis=1), atol=1e-14)
    one = structured_forest(0, 1, 0, 1, 1, 1)
    lay = fe.build_dof_layout(one, EK.Q1)
    u = interpolate(lay, lambda x, y: x * x)
    g = np.linspace(0, 1, 101)
    P = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    v, _ = fe.evaluate_at(lay, one.cell_vertices([0] * len(P)), np.zeros(len(P), int), P, u, False)
    err = np.abs(v - P[:, 0] ** 2)
    assert err.max() == pytest.approx(0.25)
    assert np.allclose(P[np.argmax(err), 0], 0.5)


@pytest.mark.parametrize("pair", ["Q1-(Q1+B)-P0", "Q2-Q2-P0"])
def test_discrete_constraint_after_solve(pair):
    d = toy(pair, levels=(3, 2))
    refine_cells(d.forest1, d.forest1.active_ids()[::3])
    d.rebuild()
    s = solve_state(d)
    assert constraint_defect(s) <= 1e-8 * (1 + np.abs(s.u).max())


def test_bad_configuration():
    with pytest.raises(ConfigurationError):
        toy("P1-P1-P0")
    pb = ProblemSpec(G.rectangle(0, 2, 0, 2), G.square(0.5, 1.5), constant(-1.0), constant(1.0),
                     constant(1.0), constant(1.0))
    with pytest.raises(ConfigurationError):
        pb.check_coefficients()
    pb.beta = constant(2.0)
    with pytest.warns(UserWarning):
        pb.check_coefficients()
    d = toy(im=(1.5, 2.5))
    with pytest.raises(ConfigurationError):
        assemble(d)


@given(st.floats(0.5, 20.0), st.floats(0.5, 20.0))
def test_blocks_scale_with_coefficients(b, b2):
    d1 = toy(beta=1.0, beta2=2.0)
    d2 = toy(beta=b, beta2=b + (b2 if b2 != 0 else 1.0))
    r1, _ = assemble_raw(d1)
    r2, _ = assemble_raw(d2)
    assert abs(r2.A - b * r1.A).max() <= 1e-12 * b
    assert abs(r2.A2 - b2 * r1.A2).max() <= 1e-12 * b2 * max(1.0, abs(r1.A2).max())
    assert abs(r2.C - r1.C).max() == 0 and abs(r2.M - r1.M).max() == 0
    assert isinstance(r1.A, sp.csr_matrix)
