import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fictifem import fe
from fictifem.mesh import (
    MeshForest, coarsen_cells, edge_arrays, interior_edges, inverse_map, locate_point,
    locate_points, refine_cells, structured_forest,
)


def unit():
    return structured_forest(0, 1, 0, 1, 1, 1)


def total_area(f):
    return f.areas().sum()


def test_refine_one_cell_gives_four_children():
    f = refine_cells(unit(), [0])
    assert len(f.active_cells) == 4
    assert np.allclose(f.diameters(), math.sqrt(2) / 2)


def test_refine_empty_set_is_noop():
    f = unit()
    v = f.version
    refine_cells(f, [])
    assert f.version == v and f.active_ids().tolist() == [0]


def test_balance_closure_refines_neighbour_once():
    f = structured_forest(0, 1, 0, 1, 2, 2)
    refine_cells(f, [0])
    # the child of cell 0 touching the centre borders both unrefined neighbours
    inner = [k for k in f.active_ids() if f.cells[k].parent == 0
             and np.allclose(f.cell_vertices([k])[0].max(0), [0.5, 0.5])]
    refine_cells(f, inner)
    assert f.is_balanced()
    levels = {k: f.cells[k].level for k in f.active_ids()}
    assert max(levels.values()) == 2
    # root neighbours of the twice-refined corner got split exactly once
    for root in (1, 2):
        assert f.cells[root].children is not None
        assert all(f.cells[c].children is None for c in f.cells[root].children)


def test_coarsen_inverse_of_refine():
    f = refine_cells(unit(), [0])
    coarsen_cells(f, f.active_ids())
    assert f.active_ids().tolist() == [0]


def test_coarsen_needs_whole_family():
    f = refine_cells(unit(), [0])
    before = f.active_ids().tolist()
    coarsen_cells(f, before[:3])
    assert f.active_ids().tolist() == before


def test_coarsen_refuses_level_gap():
    f = structured_forest(0, 1, 0, 1, 2, 1)
    refine_cells(f, [1])
    kids1 = list(f.cells[1].children)
    near = [k for k in kids1 if np.isclose(f.cell_vertices([k])[0][:, 0].min(), 0.5)]
    refine_cells(f, near[:1])
    refine_cells(f, [0])
    # family of cell 0 faces level-2 cells across x = 0.5 once cell 0 is refined:
    # coarsening it back would put level 0 next to level 2
    before = f.active_ids().tolist()
    coarsen_cells(f, f.cells[0].children)
    assert f.active_ids().tolist() == before
    assert f.is_balanced()


def test_interior_edge_counts():
    assert len(interior_edges(structured_forest(0, 1, 0, 1, 2, 2))) == 4
    assert interior_edges(unit()) == []
    f = structured_forest(0, 1, 0, 1, 2, 2)
    refine_cells(f, [0])
    nonconf = [e for e in interior_edges(f) if not e.conforming]
    assert len(nonconf) == 4
    assert sorted({e.plus for e in nonconf}) == [1, 2]


def test_locate_point_examples():
    k, r = locate_point(unit(), (0.25, 0.75))
    assert k == 0 and np.allclose(r, (0.25, 0.75))
    assert locate_point(unit(), (2.0, 2.0)) is None
    trap = MeshForest([(0, 0), (2, 0), (2.5, 2), (0, 1.5)], [(0, 1, 2, 3)])
    p = fe.map_cells(trap.cell_vertices([0]), np.array([[0.3, 0.7]]))[0][0, 0]
    k, r = locate_point(trap, p)
    assert k == 0 and np.allclose(r, (0.3, 0.7), atol=1e-10)


def random_forest(seed, steps=4, coarsen=True):
    rng = np.random.default_rng(seed)
    f = structured_forest(0, 2, 0, 1, 2, 1)
    for _ in range(steps):
        ids = f.active_ids()
        refine_cells(f, rng.choice(ids, size=max(1, len(ids) // 3), replace=False))
        if coarsen and rng.random() < 0.5:
            ids = f.active_ids()
            coarsen_cells(f, rng.choice(ids, size=len(ids) // 2, replace=False))
    return f


@given(st.integers(0, 10_000))
def test_area_and_balance_invariant(seed):
    f = random_forest(seed)
    assert abs(total_area(f) - 2.0) <= 1e-12 * 2.0
    assert f.is_balanced()


@given(st.integers(0, 10_000))
def test_locate_roundtrip(seed):
    f = random_forest(seed, steps=3)
    rng = np.random.default_rng(seed)
    ids = rng.choice(f.active_ids(), 50)
    ref = rng.uniform(0.01, 0.99, (50, 2))
    X = f.cell_vertices(ids)
    x = np.einsum("nqa,n...->nqa", fe.map_cells(X, ref)[0], np.ones(50))
    pts = x[np.arange(50), np.arange(50)]
    cells, r = locate_points(f, pts)
    back = fe.map_cells(f.cell_vertices(cells), r)[0][np.arange(50), np.arange(50)]
    assert np.allclose(back, pts, atol=1e-10)
    assert np.allclose(inverse_map(X, pts), ref, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_interior_edges_cover_each_edge_once(seed):
    f = random_forest(seed, steps=2, coarsen=False)
    p0, p1, *_ = edge_arrays(f)
    total = np.linalg.norm(p1 - p0, axis=1).sum()
    hmin = np.abs(f.cell_vertices()[:, 1, 0] - f.cell_vertices()[:, 0, 0]).min()
    assert total == pytest.approx(_grid_interior_length(f, int(round(1 / hmin))), rel=1e-12)


def _grid_interior_length(f, n):
    """Length of the union of interior cell boundaries, by sampling a fine grid."""
    step = 1.0 / n
    length = 0.0
    V = set()
    for k in f.active_ids():
        X = f.cell_vertices([k])[0]
        for i in range(4):
            a, b = X[i], X[(i + 1) % 4]
            m = int(round(np.linalg.norm(b - a) / step))
            for j in range(m):
                p = a + (j + 0.5) / m * (b - a)
                V.add((round(p[0] / step * 2), round(p[1] / step * 2)))
    for x2, y2 in V:
        x, y = x2 * step / 2, y2 * step / 2
        if 0 < x < 2 and 0 < y < 1:
            length += step
    return length
