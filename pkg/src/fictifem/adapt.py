"""Bulk-criterion marking and the solve-estimate-mark-refine loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields as dc_fields
from typing import Callable

import numpy as np

from .assembly import Discretization, ProblemSpec
from .estimator import CoefficientMode, IndicatorField, indicators
from .geometry import initial_mesh
from .mesh import coarsen_cells, refine_cells
from .solver import SolverConfig, SolverError, solve_state


@dataclass
class AdaptConfig:
    alpha1: float = 0.6
    alpha2: float = 0.0
    tol: float = 1e-6
    max_cycles: int = 8
    max_dofs: int = 200_000
    mode: str = "constant"
    marking: str = "linear"

    def __post_init__(self):
        for name in ("alpha1", "alpha2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        if self.max_dofs < 1:
            raise ValueError("max_dofs must be positive")
        CoefficientMode(self.mode)
        if self.marking not in MARKINGS:
            raise ValueError(f"marking must be one of {sorted(MARKINGS)}, got {self.marking!r}")


@dataclass
class StudyRecord:
    cycle: int
    n1: int
    n2: int
    m: int
    h_max1: float
    h_max2: float
    eta1: float
    eta2: float
    err_l2_u: float = math.nan
    err_h1_u: float = math.nan
    err_l2_u2: float = math.nan
    err_h1_u2: float = math.nan
    eff_index: float = math.nan
    gmres_iters: int = 0
    wall_time: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dc_fields(cls)]

    @property
    def n_total(self) -> int:
        return self.n1 + self.n2 + self.m


class AdaptiveLoopError(RuntimeError):
    """Raised when a cycle fails; ``records`` holds the completed cycles."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


def _values(ind):
    if isinstance(ind, IndicatorField):
        return np.asarray(ind.eta, dtype=float), np.asarray(ind.cell_ids)
    v = np.asarray(ind, dtype=float)
    return v, np.arange(len(v))


def _descending(eta):
    # descending eta, ties by ascending position
    return np.lexsort((np.arange(len(eta)), -eta))


def doerfler_mark(ind, alpha: float) -> np.ndarray:
    """Minimal set with sum eta_K^2 >= alpha^2 eta^2 (cell ids, sorted)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    eta, ids = _values(ind)
    if alpha == 0.0 or len(eta) == 0:
        return np.zeros(0, dtype=ids.dtype)
    sq = eta**2
    order = _descending(eta)
    if alpha == 1.0:
        chosen = order[sq[order] > 0]
        return np.sort(ids[chosen])
    target = alpha**2 * sq.sum()
    if sq.sum() == 0.0:
        return np.zeros(0, dtype=ids.dtype)
    csum = np.cumsum(sq[order])
    k = int(np.searchsorted(csum, target, side="left")) + 1
    k = min(k, len(eta))
    return np.sort(ids[order[:k]])


def fixed_fraction_mark(ind, alpha: float) -> np.ndarray:
    """Shortest descending prefix with sum eta_K >= alpha * sum eta_K (unsquared)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    eta, ids = _values(ind)
    if alpha == 0.0 or len(eta) == 0:
        return np.zeros(0, dtype=ids.dtype)
    order = _descending(eta)
    if alpha == 1.0:
        return np.sort(ids[order[eta[order] > 0]])
    target = alpha * eta.sum()
    if eta.sum() == 0.0:
        return np.zeros(0, dtype=ids.dtype)
    csum = np.cumsum(eta[order])
    k = min(int(np.searchsorted(csum, target, side="left")) + 1, len(eta))
    return np.sort(ids[order[:k]])


MARKINGS = {"squared": doerfler_mark, "linear": fixed_fraction_mark}


def coarsen_mark(ind, alpha2: float, exclude=()) -> np.ndarray:
    """Ascending-tail cells whose cumulative eta^2 stays <= alpha2^2 eta^2."""
    if not 0.0 <= alpha2 <= 1.0:
        raise ValueError("alpha2 must lie in [0, 1]")
    eta, ids = _values(ind)
    if alpha2 == 0.0 or len(eta) == 0:
        return np.zeros(0, dtype=ids.dtype)
    sq = eta**2
    order = _descending(eta)[::-1]
    csum = np.cumsum(sq[order])
    k = int(np.searchsorted(csum, alpha2**2 * sq.sum(), side="right"))
    picked = ids[order[:k]]
    if len(exclude):
        picked = np.setdiff1d(picked, np.asarray(exclude))
    return np.sort(picked)


def _mesh_step(forest, field, cfg):
    marked = MARKINGS[cfg.marking](field, cfg.alpha1)
    coarse = coarsen_mark(field, cfg.alpha2, exclude=marked)
    refine_cells(forest, marked)
    coarsen_cells(forest, coarse)
    return len(marked), len(coarse)


def adaptive_loop(problem: ProblemSpec, adapt: AdaptConfig | None = None,
                  solver: SolverConfig | None = None, levels: tuple[int, int] = (3, 2),
                  evaluate: Callable | None = None, on_cycle: Callable | None = None,
                  forests=None) -> list[StudyRecord]:
    """Run cycles until eta1 + eta2 <= tol, max_cycles or max_dofs.

    ``evaluate(state)`` may return a dict of error columns for the record;
    ``on_cycle(record, state, fields)`` is called after every cycle.
    """
    adapt = adapt or AdaptConfig()
    solver = solver or SolverConfig()
    problem.check_coefficients()
    if forests is None:
        forests = (initial_mesh(problem.background, levels[0]), initial_mesh(problem.immersed, levels[1]))
    disc = Discretization(problem, *forests)
    records: list[StudyRecord] = []
    for cycle in range(adapt.max_cycles):
        t0 = time.perf_counter()
        n1, n2, m = disc.dims
        if cycle > 0 and n1 + n2 + m > adapt.max_dofs:
            break
        try:
            state = solve_state(disc, config=solver)
        except SolverError as err:
            raise AdaptiveLoopError(f"cycle {cycle}: {err}", records) from err
        f1, f2 = indicators(state, adapt.mode)
        rec = StudyRecord(
            cycle, n1, n2, m,
            float(disc.forest1.diameters().max()), float(disc.forest2.diameters().max()),
            f1.total, f2.total, gmres_iters=state.report.iterations,
        )
        if evaluate is not None:
            for k, v in evaluate(state).items():
                setattr(rec, k, v)
            err = rec.err_h1_u + rec.err_h1_u2
            if math.isnan(rec.eff_index) and err > 0:
                rec.eff_index = (rec.eta1 + rec.eta2) / err
        rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        if on_cycle is not None:
            on_cycle(rec, state, (f1, f2))
        if f1.total + f2.total <= adapt.tol or cycle == adapt.max_cycles - 1:
            break
        _mesh_step(disc.forest1, f1, adapt)
        _mesh_step(disc.forest2, f2, adapt)
        disc.rebuild()
    return records
