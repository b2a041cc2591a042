"""Preconditioned GMRES iteration counts on uniformly refined circle meshes."""
import argparse
from dataclasses import dataclass

from fictifem import harness
from fictifem.assembly import Discretization, assemble
from fictifem.geometry import initial_mesh
from fictifem.solver import SolverConfig, solve


@dataclass
class IterConfig:
    preset: str = "circle_10"
    max_level: int = 6
    schur_scaling: float = 1.0


def main():
    cfg = IterConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default=cfg.preset)
    ap.add_argument("--max-level", type=int, default=cfg.max_level)
    ap.add_argument("--schur-scaling", type=float, default=cfg.schur_scaling)
    args = ap.parse_args()
    p = harness.get_preset(args.preset)
    sc = SolverConfig("gmres", schur_scaling=args.schur_scaling)
    for l1 in range(2, args.max_level + 1):
        d = Discretization(p.problem, initial_mesh(p.problem.background, l1), initial_mesh(p.problem.immersed, l1 - 1))
        rep = solve(assemble(d), sc)[3]
        print(f"levels ({l1},{l1 - 1}) N={sum(d.dims):>7} iterations={rep.iterations}")


if __name__ == "__main__":
    main()
