"""Command line entry point: ``run``, ``study`` and ``check``."""
from __future__ import annotations

import argparse
import contextlib
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .adapt import AdaptConfig, AdaptiveLoopError, adaptive_loop
from .harness import ConfigError, RunConfig, UnknownPreset

# settings of the reference adaptive study
STUDY_ADAPT = AdaptConfig(alpha1=0.6, alpha2=0.0, max_cycles=8)

H1_WINDOW = (-1.25, -0.75)
L2_WINDOW = (-2.4, -1.6)
EFF_RATIO_MAX = 3.0


def thread_limit():
    """Cap BLAS/OpenMP pools at FICTIFEM_THREADS when set."""
    raw = os.environ.get("FICTIFEM_THREADS")
    if not raw:
        return contextlib.nullcontext()
    n = int(raw)
    if n < 1:
        raise ConfigError("FICTIFEM_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _levels(cfg: RunConfig, preset) -> tuple[int, int]:
    l1, l2 = preset.levels
    if cfg.problem.level1 >= 0:
        l1 = cfg.problem.level1
    if cfg.problem.level2 >= 0:
        l2 = cfg.problem.level2
    return l1, l2


def run_study(cfg: RunConfig, log=print):
    """Adaptive study described by ``cfg``; returns (preset, records)."""
    preset = harness.get_preset(cfg.problem.preset, cfg.problem.element_pair)
    out = Path(cfg.output.directory)
    evaluate = None
    if preset.has_exact:
        def evaluate(state):
            return harness.record_errors(state, preset.problem.exact)

    def on_cycle(rec, state, fields):
        log(f"cycle {rec.cycle}: N={rec.n_total} eta={rec.eta1 + rec.eta2:.4e} ({rec.wall_time:.2f}s)")
        if cfg.output.vtk:
            harness.write_state_vtk(out, rec.cycle, state, fields)

    records = adaptive_loop(preset.problem, cfg.adapt, cfg.solver, levels=_levels(cfg, preset),
                            evaluate=evaluate, on_cycle=on_cycle)
    return preset, records


def h1_sum(r) -> float:
    """Full H1 norm of e on the background plus full H1 norm of e2."""
    return math.hypot(r.err_l2_u, r.err_h1_u) + r.err_h1_u2


def summarize(preset, records) -> tuple[list[str], bool]:
    """Rate table lines and whether the reference windows are met."""
    lines = [f"preset {preset.name}: {len(records)} cycles, final N={records[-1].n_total}"]
    head = f"{'cycle':>5} {'N':>8} {'eta1':>11} {'eta2':>11}"
    if preset.has_exact:
        head += f" {'|e|_0':>11} {'|e|_1+|e2|_1':>13} {'eff':>8}"
    lines.append(head)
    for r in records:
        row = f"{r.cycle:>5} {r.n_total:>8} {r.eta1:>11.4e} {r.eta2:>11.4e}"
        if preset.has_exact:
            row += f" {r.err_l2_u:>11.4e} {h1_sum(r):>13.4e} {r.eff_index:>8.2f}"
        lines.append(row)
    ok = True
    if preset.has_exact and len(records) >= 3:
        s1 = harness.eoc(records, [h1_sum(r) for r in records])
        s0 = harness.eoc(records, [r.err_l2_u for r in records])
        eff = [r.eff_index for r in records[-5:]]
        ratio = max(eff) / min(eff)
        c1 = H1_WINDOW[0] <= s1 <= H1_WINDOW[1]
        c0 = L2_WINDOW[0] <= s0 <= L2_WINDOW[1]
        c2 = ratio <= EFF_RATIO_MAX
        lines.append(f"H1 rate {s1:+.3f} in {list(H1_WINDOW)}: {'ok' if c1 else 'out of range'}")
        lines.append(f"L2 rate {s0:+.3f} in {list(L2_WINDOW)}: {'ok' if c0 else 'out of range'}")
        lines.append(f"efficiency max/min {ratio:.2f} <= {EFF_RATIO_MAX}: {'ok' if c2 else 'too large'}")
        ok = c1 and c0 and c2
    else:
        eta = np.array([r.eta1 + r.eta2 for r in records])
        mono = bool(np.all(np.diff(eta) < 0))
        lines.append(f"estimator decreasing: {'ok' if mono else 'no'}")
        ok = mono
    return lines, ok


def _emit(cfg: RunConfig, preset, records, extra=()):
    out = Path(cfg.output.directory)
    path = harness.write_csv(records, out / cfg.output.csv)
    lines, ok = summarize(preset, records)
    lines = list(extra) + lines
    if cfg.output.summary:
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {path}")
    return ok


def cmd_run(args) -> int:
    cfg = harness.load_config(args.config) if args.config else RunConfig()
    if args.preset:
        cfg.problem.preset = args.preset
    if args.output:
        cfg.output.directory = args.output
    try:
        preset, records = run_study(cfg)
    except AdaptiveLoopError as err:
        print(f"error: {err}", file=sys.stderr)
        if err.records:
            harness.write_csv(err.records, Path(cfg.output.directory) / cfg.output.csv)
        return 1
    _emit(cfg, preset, records)
    return 0


def cmd_study(args) -> int:
    cfg = RunConfig()
    cfg.problem.preset = args.preset
    cfg.adapt = replace(STUDY_ADAPT, max_cycles=args.cycles)
    cfg.output.directory = args.output or str(Path("results") / args.preset)
    t0 = time.perf_counter()
    preset, records = run_study(cfg, log=lambda s: None)
    ok = _emit(cfg, preset, records, [f"wall time {time.perf_counter() - t0:.1f}s"])
    return 0 if ok else 1


def cmd_check(args) -> int:
    from . import checks

    failures = 0
    for name, fn in checks.CHECKS:
        try:
            fn()
            print(f"ok    {name}")
        except Exception as err:  # report every failing invariant
            failures += 1
            print(f"FAIL  {name}: {err}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fictifem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="single adaptive study")
    r.add_argument("--preset", help=f"one of {', '.join(harness.PRESETS)}")
    r.add_argument("--config", help="key = value configuration file")
    r.add_argument("--output", help="output directory (overrides the config)")
    s = sub.add_parser("study", help="reference study with rate table and summary")
    s.add_argument("--preset", required=True)
    s.add_argument("--cycles", type=int, default=STUDY_ADAPT.max_cycles)
    s.add_argument("--output")
    sub.add_parser("check", help="quick invariant suite")
    return p


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    preset = getattr(args, "preset", None)
    if preset is not None and preset not in harness.PRESETS:
        print(f"error: unknown preset {preset!r}; valid presets: {', '.join(harness.PRESETS)}",
              file=sys.stderr)
        return 2
    try:
        with thread_limit():
            return {"run": cmd_run, "study": cmd_study, "check": cmd_check}[args.command](args)
    except (ConfigError, UnknownPreset, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())
