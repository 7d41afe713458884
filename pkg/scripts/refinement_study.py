"""Adjoint vs value-gradient error and Lipschitz estimates on Example 1 over a grid ladder.

    python3 scripts/refinement_study.py --steps 2e-3 1e-3 5e-4
"""
import argparse
import time

from hybridoc.equivalence import compare
from hybridoc.hdp import GridSpec, estimate_lipschitz, solve_hjb
from hybridoc.hmp import solve
from hybridoc.presets import GRID_DEFAULTS, example1


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=float, nargs="+", default=[2e-3, 1e-3, 5e-4])
    args = ap.parse_args()
    prob = example1()
    ext = solve(prob)
    ts = ext.switching_times[0]
    print(f"extremal: t_s = {ts:.10f}, J = {ext.cost:.12f}")
    print(f"{'d':>8} {'max rel':>10} {'median rel':>11} {'switch':>10} {'K0':>8} {'K1':>8} {'V(0,1)':>10} {'sec':>6}")
    prev = None
    for d in args.steps:
        t0 = time.perf_counter()
        specs = [GridSpec(lo, hi, d, d) for lo, hi in GRID_DEFAULTS["example1"]["boxes"]]
        stack = solve_hjb(prob.sys, prob.cost, prob.q_sequence, specs, prob.span)
        rep = compare(ext, stack)
        k0 = estimate_lipschitz(stack[0], ((0.5,), (2.0,)), (0.0, ts))
        k1 = estimate_lipschitz(stack[1], ((-2.0,), (-0.4,)), (ts, 1.0))
        v = stack[0].interpolate(0.0, [1.0])
        line = (f"{d:8.1e} {rep.max_rel:10.3e} {rep.median_rel:11.3e} {rep.switches[0].mismatch:10.3e} "
                f"{k0:8.4f} {k1:8.4f} {v:10.6f} {time.perf_counter() - t0:6.1f}")
        if prev is not None:
            line += f"  ratio {prev / rep.max_rel:.2f}"
        prev = rep.max_rel
        print(line)


if __name__ == "__main__":
    main()
