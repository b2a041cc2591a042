"""Direct and preconditioned-GMRES solution of the saddle-point system."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import BlockSystem, assemble, residual


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "direct"
    gmres_rel_tol: float = 1e-10
    restart: int = 200
    max_iters: int = 5000
    schur_scaling: float = 1.0

    def __post_init__(self):
        if self.method not in ("direct", "gmres"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.gmres_rel_tol > 0:
            raise ValueError("gmres_rel_tol must be positive")
        if self.restart < 10:
            raise ValueError("restart must be at least 10")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.schur_scaling == 0:
            raise ValueError("schur_scaling must be nonzero")


@dataclass
class SolveReport:
    method: str
    iterations: int
    residuals: tuple[float, float, float]
    rhs_norm: float
    history: list = field(default_factory=list)


def _factor(mat, name):
    try:
        return spla.splu(sp.csc_matrix(mat))
    except RuntimeError as err:
        raise SolverError(f"factorization of {name} failed: {err}") from err


class BlockTriangularPreconditioner:
    """Upper block-triangular approximate inverse.

    Applied to (r1, r2, r3): lambda = S^-1 r3 with S = -s * diag(cell areas),
    then u2 = (A2 + delta*Mass2)^-1 (r2 + M^T lambda), then
    u = A^-1 (r1 - C^T lambda).
    """

    def __init__(self, system: BlockSystem, config: SolverConfig):
        self.dims = system.dims
        self.C, self.M = system.C, system.M
        areas = np.asarray(system.cell_areas, dtype=float)
        if np.any(areas <= 0):
            raise SolverError("multiplier mass has a non-positive diagonal entry")
        self.schur = -config.schur_scaling * areas
        tr_a = system.A2.diagonal().sum()
        tr_m = system.mass2.diagonal().sum()
        self.delta = 1e-8 * tr_a / tr_m if tr_m != 0 else 0.0
        self.lu_a = _factor(system.A, "A")
        self.lu_a2 = _factor(system.A2 + self.delta * system.mass2, "A2 + delta*Mass2")

    def apply(self, r: np.ndarray) -> np.ndarray:
        n1, n2, _ = self.dims
        r1, r2, r3 = r[:n1], r[n1:n1 + n2], r[n1 + n2:]
        lam = r3 / self.schur
        u2 = self.lu_a2.solve(r2 + self.M.T @ lam)
        u = self.lu_a.solve(r1 - self.C.T @ lam)
        return np.concatenate([u, u2, lam])

    __call__ = apply

    def as_operator(self) -> spla.LinearOperator:
        n = sum(self.dims)
        return spla.LinearOperator((n, n), matvec=self.apply, dtype=float)


def make_preconditioner(system: BlockSystem, config: SolverConfig | None = None):
    return BlockTriangularPreconditioner(system, config or SolverConfig())


def _block_residuals(system, x):
    return tuple(residual(system, *system.split(x)))


def solve(system: BlockSystem, config: SolverConfig | None = None):
    """Return (u, u2, lam) on free DoFs and a SolveReport."""
    config = config or SolverConfig()
    K = system.matrix()
    b = system.rhs()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        x = np.zeros_like(b)
        return (*system.split(x), SolveReport(config.method, 0, (0.0, 0.0, 0.0), 0.0))

    if config.method == "direct":
        x = _factor(K, "the saddle-point matrix").solve(b)
        res = _block_residuals(system, x)
        if max(res) > 1e-9 * (1 + bnorm):
            raise SolverError(f"direct solve residuals {res} exceed tolerance")
        return (*system.split(x), SolveReport("direct", 0, res, bnorm))

    prec = make_preconditioner(system, config)
    tol = config.gmres_rel_tol * (1 + bnorm)
    history: list[float] = []
    x, info = spla.gmres(
        K, b, rtol=0.0, atol=tol, restart=config.restart, maxiter=config.max_iters,
        M=prec.as_operator(), callback=history.append, callback_type="pr_norm",
    )
    res = _block_residuals(system, x)
    if info != 0 or max(res) > tol:
        raise SolverError(
            f"GMRES did not converge in {len(history)} iterations (info={info}, residuals={res})"
        )
    return (*system.split(x), SolveReport("gmres", len(history), res, bnorm, history))


@dataclass
class SolvedState:
    """A solved mesh pair: full DoF vectors (constrained entries filled)."""

    disc: object
    system: BlockSystem
    u: np.ndarray
    u2: np.ndarray
    lam: np.ndarray
    report: SolveReport


def solve_state(disc, system: BlockSystem | None = None, config: SolverConfig | None = None) -> SolvedState:
    system = system if system is not None else assemble(disc)
    u, u2, lam, report = solve(system, config)
    U = disc.layout1.expand(u, system.dirichlet_values)
    U2 = disc.layout2.expand(u2)
    return SolvedState(disc, system, U, U2, np.asarray(lam, dtype=float), report)
