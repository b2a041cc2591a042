import numpy as np
import pytest
import scipy.sparse as sp

from fictifem import harness
from fictifem.assembly import BlockSystem, Discretization, assemble
from fictifem.geometry import initial_mesh
from fictifem.solver import SolverConfig, SolverError, make_preconditioner, solve, solve_state

from test_assembly import toy


def circle_system(levels=(3, 2)):
    p = harness.get_preset("circle_10")
    d = Discretization(p.problem, initial_mesh(p.problem.background, levels[0]),
                       initial_mesh(p.problem.immersed, levels[1]))
    return d, assemble(d)


def test_zero_rhs_gives_zero():
    s = assemble(toy(f=0.0, f2=0.0))
    for method in ("direct", "gmres"):
        u, u2, lam, rep = solve(s, SolverConfig(method=method))
        assert not u.any() and not u2.any() and not lam.any() and rep.iterations == 0


def test_direct_and_gmres_agree():
    _, s = circle_system()
    xd = np.concatenate(solve(s, SolverConfig("direct"))[:3])
    u, u2, lam, rep = solve(s, SolverConfig("gmres"))
    assert np.abs(np.concatenate([u, u2, lam]) - xd).max() <= 1e-7
    assert 0 < rep.iterations < 400
    assert max(rep.residuals) <= 1e-10 * (1 + rep.rhs_norm)


def test_tiny_system_matches_dense_oracle():
    d = toy(levels=(0, 0), bg=(0, 2), im=(0.5, 1.5))
    s = assemble(d)
    assert sum(s.dims) <= 15
    K = s.matrix().toarray()
    x = np.linalg.solve(K, s.rhs())
    for method in ("direct", "gmres"):
        got = np.concatenate(solve(s, SolverConfig(method))[:3])
        assert np.abs(got - x).max() <= 1e-10


def _identity_system(n1=3, n2=2, m=2, seed=0):
    rng = np.random.default_rng(seed)
    C = sp.csr_matrix(rng.standard_normal((m, n1)))
    M = sp.csr_matrix(rng.standard_normal((m, n2)))
    I1, I2 = sp.identity(n1, format="csr"), sp.identity(n2, format="csr")
    z = np.zeros
    return BlockSystem(I1, I2, C, M, z(n1), z(n2), z(m), I2, None, z(0), np.ones(m))


def test_preconditioner_is_block_back_substitution():
    s = _identity_system()
    cfg = SolverConfig(schur_scaling=1.0)
    P = make_preconditioner(s, cfg)
    r = np.arange(1.0, 8.0)
    r1, r2, r3 = r[:3], r[3:5], r[5:]
    lam = -r3
    u2 = (r2 + s.M.T @ lam) / (1 + P.delta)
    u = r1 - s.C.T @ lam
    assert np.allclose(P(r), np.concatenate([u, u2, lam]), atol=1e-14)


def test_schur_scaling_halves_multiplier_component():
    s = _identity_system()
    r = np.r_[np.zeros(5), 1.0, -2.0]
    a = make_preconditioner(s, SolverConfig(schur_scaling=1.0))(r)[5:]
    b = make_preconditioner(s, SolverConfig(schur_scaling=2.0))(r)[5:]
    assert np.allclose(b, a / 2)


def test_preconditioned_residual_is_consistent():
    _, s = circle_system((2, 1))
    K, b = s.matrix(), s.rhs()
    x = np.concatenate(solve(s)[:3])
    P = make_preconditioner(s)
    assert np.linalg.norm(P(b - K @ x)) <= 1e-6 * np.linalg.norm(P(b))


def test_solve_state_fills_constrained_and_dirichlet_values():
    d, s = circle_system((3, 2))
    st = solve_state(d, s)
    g = s.dirichlet_values
    assert np.allclose(st.u[d.layout1.dirichlet], g)
    assert len(st.u) == d.layout1.n_dofs and len(st.u2) == d.layout2.n_dofs


def test_gmres_failure_is_reported():
    _, s = circle_system((3, 2))
    with pytest.raises(SolverError):
        solve(s, SolverConfig("gmres", max_iters=1, restart=10))


@pytest.mark.parametrize("bad", [dict(method="cg"), dict(gmres_rel_tol=0), dict(restart=2),
                                 dict(max_iters=0), dict(schur_scaling=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_gmres_iterations_recorded_across_levels():
    its = []
    for lv in [(2, 1), (3, 2), (4, 3)]:
        _, s = circle_system(lv)
        its.append(solve(s, SolverConfig("gmres"))[3].iterations)
    assert all(i > 0 for i in its)
