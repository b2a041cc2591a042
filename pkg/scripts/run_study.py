"""Reference adaptive studies for several presets; one results directory each."""
import argparse
from dataclasses import dataclass

from fictifem.cli import run_cli


@dataclass
class StudyConfig:
    presets: tuple = ("circle_10", "circle_1000", "circle_reversed", "square", "lshape", "flower")
    cycles: int = 8
    root: str = "results"


def main():
    cfg = StudyConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("presets", nargs="*", default=list(cfg.presets))
    ap.add_argument("--cycles", type=int, default=cfg.cycles)
    ap.add_argument("--root", default=cfg.root)
    args = ap.parse_args()
    codes = {}
    for name in args.presets:
        print(f"== {name}")
        codes[name] = run_cli(["study", "--preset", name, "--cycles", str(args.cycles),
                               "--output", f"{args.root}/{name}"])
    print("\n".join(f"{k}: {'windows met' if v == 0 else 'windows missed'}" for k, v in codes.items()))


if __name__ == "__main__":
    main()
