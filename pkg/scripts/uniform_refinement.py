"""Errors and efficiency under uniform refinement of both meshes (circle presets)."""
import argparse
from types import SimpleNamespace
from dataclasses import dataclass

from fictifem import harness
from fictifem.assembly import Discretization
from fictifem.cli import h1_sum
from fictifem.estimator import indicators
from fictifem.geometry import initial_mesh
from fictifem.solver import solve_state


@dataclass
class UniformConfig:
    preset: str = "circle_10"
    pair: str = "Q1-(Q1+B)-P0"
    offset: int = 1
    max_level: int = 6


def main():
    cfg = UniformConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default=cfg.preset)
    ap.add_argument("--pair", default=cfg.pair)
    ap.add_argument("--offset", type=int, default=cfg.offset, help="background level minus immersed level")
    ap.add_argument("--max-level", type=int, default=cfg.max_level)
    args = ap.parse_args()
    p = harness.get_preset(args.preset, args.pair)
    print(f"{'l1':>3} {'l2':>3} {'N':>8} {'|e|_0':>10} {'H1 sum':>10} {'eta':>10} {'eff':>7}")
    for l1 in range(2, args.max_level + 1):
        l2 = l1 - args.offset
        if l2 < 0:
            continue
        d = Discretization(p.problem, initial_mesh(p.problem.background, l1), initial_mesh(p.problem.immersed, l2))
        s = solve_state(d)
        f1, f2 = indicators(s)
        cols = harness.record_errors(s, p.problem.exact)
        err = h1_sum(SimpleNamespace(**cols))
        eff = (f1.total + f2.total) / (cols["err_h1_u"] + cols["err_h1_u2"])
        print(f"{l1:>3} {l2:>3} {sum(d.dims):>8} {cols['err_l2_u']:>10.3e} {err:>10.3e} "
              f"{f1.total + f2.total:>10.3e} {eff:>7.2f}")


if __name__ == "__main__":
    main()
