import numpy as np
import pytest
from hypothesis import given, strategies as st

from fictifem import geometry as G
from fictifem.assembly import Discretization, ProblemSpec, constant, interpolate
from fictifem.estimator import (
    CoefficientMode, check_mode, edge_residual_1, edge_residual_2, element_residual_1,
    element_residual_2, indicators, project_p0, restriction_term,
)
from fictifem.mesh import edge_arrays, refine_cells
from fictifem.solver import SolvedState, solve_state


def disc(f=1.0, f2=1.0, beta=1.0, beta2=4.0, levels=(2, 1), pair="Q1-(Q1+B)-P0"):
    wrap = lambda c: c if callable(c) else constant(c)
    pb = ProblemSpec(G.rectangle(0, 2, 0, 2), G.square(0.5, 1.5), wrap(beta), wrap(beta2),
                     wrap(f), wrap(f2), pair)
    return Discretization(pb, G.initial_mesh(pb.background, levels[0]), G.initial_mesh(pb.immersed, levels[1]))


def state(d, u=None, u2=None, lam=None):
    u = np.zeros(d.layout1.n_dofs) if u is None else u
    u2 = np.zeros(d.layout2.n_dofs) if u2 is None else u2
    lam = np.zeros(d.layout_l.n_dofs) if lam is None else np.full(d.layout_l.n_dofs, float(lam))
    return SolvedState(d, None, u, u2, lam, None)


def unit(x0=0.0, y0=0.0, a=1.0, b=1.0):
    return np.array([[x0, y0], [x0 + a, y0], [x0 + a, y0 + b], [x0, y0 + b]])


def test_project_p0_examples():
    assert project_p0(constant(7.0), unit()) == pytest.approx(7.0, abs=1e-14)
    assert project_p0(lambda x, y: x, unit()) == pytest.approx(0.5, abs=1e-14)
    assert project_p0(lambda x, y: x**2, unit(a=2.0)) == pytest.approx(4 / 3, abs=1e-14)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3), st.floats(0.1, 3))
def test_project_p0_reproduces_affine_functions_at_centroid(x0, y0, a, b):
    v = project_p0(lambda x, y: 2 * x - 3 * y + 1, unit(x0, y0, a, b))
    assert v == pytest.approx(2 * (x0 + a / 2) - 3 * (y0 + b / 2) + 1, abs=1e-11)


def test_unit_forcing_gives_cell_size_residual():
    d = disc(f=1.0)
    r = element_residual_1(state(d))
    assert np.allclose(r, 0.5, atol=1e-13)  # sqrt(area) of 0.5 x 0.5 cells


def test_constant_multiplier_element_residuals():
    d = disc(f=0.0, f2=0.0)
    c = -2.5
    r1 = element_residual_1(state(d, lam=c))
    X = d.forest1.cell_vertices(d.layout1.cell_ids).mean(axis=1)
    inner = np.all(np.abs(X - 1.0) < 0.5, axis=1)
    assert np.allclose(r1[inner], abs(c) * 0.5, atol=1e-12)
    assert np.allclose(r1[~inner], 0.0, atol=1e-12)
    d = disc(f=1.0, f2=1.0)  # f3 = 0
    r2 = element_residual_2(state(d, lam=0.9))
    assert np.allclose(r2, 0.9 * np.sqrt(d.forest2.areas(d.layout2.cell_ids)), atol=1e-13)


@pytest.mark.parametrize("pair", ["Q1-(Q1+B)-P0", "Q2-Q2-P0"])
def test_linear_function_has_no_jumps(pair):
    d = disc(pair=pair)
    u = interpolate(d.layout1, lambda x, y: 2 * x - y + 3)
    assert np.abs(edge_residual_1(state(d, u=u))).max() <= 1e-12


@pytest.mark.parametrize("beta", [1.0, 3.0])
def test_kink_jump(beta):
    d = disc(beta=beta, beta2=beta + 2)
    u = interpolate(d.layout1, lambda x, y: np.abs(x - 1.0))
    r = edge_residual_1(state(d, u=u))
    p0, p1, *_ = edge_arrays(d.forest1)
    on = np.isclose(p0[:, 0], 1.0) & np.isclose(p1[:, 0], 1.0)
    L = np.linalg.norm(p1 - p0, axis=1)
    assert np.allclose(r[on], 2 * beta * np.sqrt(L[on]), atol=1e-12)
    assert np.abs(r[~on]).max() <= 1e-12


def test_interface_conormal_term():
    d = disc(beta=1.0, beta2=10.0)
    u2 = interpolate(d.layout2, lambda x, y: x)
    interior, gamma = edge_residual_2(state(d, u2=u2))
    assert np.abs(interior).max() <= 1e-12
    from fictifem.mesh import boundary_edge_arrays

    p0, p1, _ = boundary_edge_arrays(d.forest2)
    L = np.linalg.norm(p1 - p0, axis=1)
    vertical = np.isclose(p0[:, 0], p1[:, 0])
    assert np.allclose(gamma[vertical], 9 * np.sqrt(L[vertical]), atol=1e-12)
    assert np.abs(gamma[~vertical]).max() <= 1e-12


def test_restriction_term_vanishes_for_matching_functions():
    d = disc()
    fn = lambda x, y: x * y + x
    s = state(d, u=interpolate(d.layout1, fn), u2=interpolate(d.layout2, fn))
    assert np.abs(restriction_term(s)).max() <= 1e-12
    s = state(d, u2=interpolate(d.layout2, constant(1.0)))
    assert np.allclose(restriction_term(s), d.forest2.areas(d.layout2.cell_ids), atol=1e-12)


def solved(levels=(3, 2), refine=True, **kw):
    d = disc(**kw, levels=levels)
    if refine:
        refine_cells(d.forest1, d.forest1.active_ids()[::7])
        d.rebuild()
    return solve_state(d)


def test_indicator_bookkeeping():
    s = solved()
    f1, f2 = indicators(s)
    for f in (f1, f2):
        parts = f.element + f.interior_edge + f.interface_edge + f.restriction
        assert np.allclose(f.eta**2, parts, rtol=1e-13)
        # each interior edge contributes half to both neighbours
        assert f.interior_edge.sum() == pytest.approx(f.edge_terms.sum(), rel=1e-12)
        assert f.total == pytest.approx(np.sqrt(parts.sum()), rel=1e-13)
    assert not f1.interface_edge.any() and not f1.restriction.any()
    assert len(f1) == len(s.disc.layout1.cell_ids) and len(f2) == len(s.disc.layout2.cell_ids)


def test_forcing_oscillation_example():
    d = disc(f=lambda x, y: x, f2=lambda x, y: x, levels=(1, 0))
    f1, _ = indicators(state(d))
    # h = sqrt(2), ||x - 1/2||^2 over a unit cell = 1/12
    assert np.allclose(f1.osc, np.sqrt(2) * np.sqrt(1 / 12), atol=1e-13)


def test_modes_agree_for_constant_coefficients():
    s = solved(beta=2.0, beta2=5.0)
    a = indicators(s, CoefficientMode.CONSTANT)
    b = indicators(s, "smooth")
    for fa, fb in zip(a, b):
        assert np.allclose(fa.eta_sq, fb.eta_sq, rtol=1e-10, atol=1e-14)
        assert np.allclose(fa.osc_sq, fb.osc_sq, rtol=1e-10, atol=1e-14)


def test_constant_mode_rejects_variable_coefficients():
    d = disc(beta=lambda x, y: 1 + 0.1 * x, beta2=5.0)
    with pytest.raises(ValueError):
        check_mode(d.problem, "constant")
    s = solve_state(d)
    f1, f2 = indicators(s, "smooth")
    assert np.all(np.isfinite(f1.eta)) and np.all(f1.osc_sq >= 0)


def test_estimator_is_homogeneous_without_forcing():
    d = disc(f=0.0, f2=0.0, levels=(3, 2))
    rng = np.random.default_rng(3)
    u = d.layout1.distribute(rng.standard_normal(d.layout1.n_dofs))
    u2 = d.layout2.distribute(rng.standard_normal(d.layout2.n_dofs))
    a = indicators(state(d, u, u2, 0.7))
    b = indicators(state(d, 3 * u, 3 * u2, 2.1))
    for fa, fb in zip(a, b):
        assert np.allclose(fb.eta, 3 * fa.eta, rtol=1e-12)
