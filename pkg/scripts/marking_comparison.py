"""Convergence rates of the circle study under the two bulk-marking rules."""
import argparse
from dataclasses import dataclass, replace

from fictifem import harness
from fictifem.adapt import adaptive_loop
from fictifem.cli import STUDY_ADAPT, h1_sum


@dataclass
class CompareConfig:
    preset: str = "circle_10"
    cycles: int = 8
    markings: tuple = ("linear", "squared")


def main():
    cfg = CompareConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default=cfg.preset)
    ap.add_argument("--cycles", type=int, default=cfg.cycles)
    args = ap.parse_args()
    p = harness.get_preset(args.preset)
    for marking in cfg.markings:
        ac = replace(STUDY_ADAPT, max_cycles=args.cycles, marking=marking)
        recs = adaptive_loop(p.problem, ac, levels=p.levels,
                             evaluate=lambda s: harness.record_errors(s, p.problem.exact))
        s1 = harness.eoc(recs, [h1_sum(r) for r in recs])
        s0 = harness.eoc(recs, [r.err_l2_u for r in recs])
        print(f"{marking:>8}: final N={recs[-1].n_total:>6} H1 rate {s1:+.3f} L2 rate {s0:+.3f}")


if __name__ == "__main__":
    main()
