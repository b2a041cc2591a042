import numpy as np
import pytest
from hypothesis import given, strategies as st

from fictifem import adapt as A
from fictifem.adapt import (
    AdaptConfig, AdaptiveLoopError, StudyRecord, adaptive_loop, coarsen_mark, doerfler_mark,
    fixed_fraction_mark,
)
from fictifem.solver import SolverError

from test_estimator import disc

fields = st.lists(st.floats(0, 1e3, allow_nan=False, allow_subnormal=False), min_size=1, max_size=60).map(np.array)
alphas = st.floats(0.01, 0.99)


def test_doerfler_examples():
    assert doerfler_mark([3.0, 2.0, 1.0], 0.6).tolist() == [0]
    assert doerfler_mark([3.0, 2.0, 1.0], 1.0).tolist() == [0, 1, 2]
    assert doerfler_mark([3.0, 2.0, 1.0], 0.0).tolist() == []
    assert doerfler_mark([0.0, 0.0], 0.5).tolist() == []
    # ties resolved by position
    assert doerfler_mark([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [0]
    # a positive field always yields a nonempty set, even when alpha * total underflows
    assert fixed_fraction_mark([5e-324], 0.5).tolist() == [0]


def test_coarsen_examples():
    assert coarsen_mark([4.0, 1, 1, 1, 1], 0.5).tolist() == [1, 2, 3, 4]
    assert coarsen_mark([4.0, 1, 1, 1, 1], 0.0).tolist() == []
    assert coarsen_mark([2.0], 0.99).tolist() == []
    assert coarsen_mark([4.0, 1, 1, 1, 1], 0.5, exclude=[2]).tolist() == [1, 3, 4]


def test_fixed_fraction_examples():
    assert fixed_fraction_mark([3.0, 2.0, 1.0], 0.5).tolist() == [0]
    assert fixed_fraction_mark([3.0, 2.0, 1.0], 0.6).tolist() == [0, 1]
    assert fixed_fraction_mark([3.0, 2.0, 0.0], 1.0).tolist() == [0, 1]


@pytest.mark.parametrize("fn", [doerfler_mark, fixed_fraction_mark, coarsen_mark])
def test_alpha_range(fn):
    with pytest.raises(ValueError):
        fn([1.0], 1.5)


@given(fields, alphas)
def test_doerfler_bulk_and_minimality(eta, alpha):
    m = doerfler_mark(eta, alpha)
    sq, total = eta**2, np.sum(eta**2)
    if total == 0:
        assert len(m) == 0
        return
    assert np.sum(sq[m]) >= alpha**2 * total * (1 - 1e-12)
    # dropping the smallest marked cell breaks the criterion, and nothing better is left out
    assert np.sum(sq[m]) - sq[m].min() < alpha**2 * total
    rest = np.setdiff1d(np.arange(len(eta)), m)
    if len(rest):
        assert eta[rest].max() <= eta[m].min()


@given(fields, alphas)
def test_fixed_fraction_bulk_and_minimality(eta, alpha):
    m = fixed_fraction_mark(eta, alpha)
    total = eta.sum()
    if total == 0:
        assert len(m) == 0
        return
    assert eta[m].sum() >= alpha * total * (1 - 1e-12)
    assert eta[m].sum() - eta[m].min() < alpha * total


@given(fields, alphas)
def test_coarsen_tail_bound(eta, alpha):
    m = coarsen_mark(eta, alpha)
    assert np.sum(eta[m] ** 2) <= alpha**2 * np.sum(eta**2) * (1 + 1e-12)
    rest = np.setdiff1d(np.arange(len(eta)), m)
    if len(m) and len(rest):
        assert eta[m].max() <= eta[rest].min()


@pytest.mark.parametrize("bad", [dict(alpha1=-0.1), dict(alpha2=2), dict(tol=0), dict(max_cycles=0),
                                 dict(max_dofs=0), dict(mode="exact"), dict(marking="random")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AdaptConfig(**bad)


def problem():
    return disc(levels=(2, 1)).problem


def test_huge_tolerance_stops_after_one_cycle():
    recs = adaptive_loop(problem(), AdaptConfig(tol=1e9), levels=(2, 1))
    assert len(recs) == 1 and recs[0].cycle == 0


def test_zero_alpha_keeps_the_mesh():
    recs = adaptive_loop(problem(), AdaptConfig(alpha1=0.0, max_cycles=3), levels=(2, 1))
    assert len(recs) == 3
    assert len({(r.n1, r.n2, r.m) for r in recs}) == 1
    assert recs[0].eta1 == pytest.approx(recs[-1].eta1, rel=1e-12)


@pytest.mark.parametrize("marking", ["linear", "squared"])
def test_dofs_increase_and_records_filled(marking):
    seen = []
    recs = adaptive_loop(problem(), AdaptConfig(max_cycles=3, marking=marking), levels=(2, 1),
                         evaluate=lambda s: {"err_h1_u": 1.0, "err_h1_u2": 1.0},
                         on_cycle=lambda r, s, f: seen.append(r.cycle))
    assert seen == [0, 1, 2]
    n = [r.n_total for r in recs]
    assert all(a < b for a, b in zip(n, n[1:]))
    for r in recs:
        assert r.eff_index == pytest.approx((r.eta1 + r.eta2) / 2)
        assert r.wall_time > 0 and r.h_max1 > 0 and r.h_max2 > 0
    assert StudyRecord.columns()[:4] == ["cycle", "n1", "n2", "m"]


def test_dof_budget_stops_refinement():
    recs = adaptive_loop(problem(), AdaptConfig(max_cycles=6, max_dofs=100), levels=(2, 1))
    assert all(r.n_total <= 100 for r in recs[1:])
    assert len(recs) < 6


def test_solver_failure_keeps_completed_cycles(monkeypatch):
    real = A.solve_state
    calls = []

    def flaky(*a, **k):
        calls.append(1)
        if len(calls) == 3:
            raise SolverError("singular")
        return real(*a, **k)

    monkeypatch.setattr(A, "solve_state", flaky)
    with pytest.raises(AdaptiveLoopError) as info:
        adaptive_loop(problem(), AdaptConfig(max_cycles=5), levels=(2, 1))
    assert [r.cycle for r in info.value.records] == [0, 1]
    assert "cycle 2" in str(info.value)
