"""Random perturbations and the discrete search against the extremals of both presets.

    python3 scripts/local_optimality.py --n 200 --seed 0
"""
import argparse
import time

import numpy as np

from hybridoc.hmp import solve
from hybridoc.oracle import brute_force, perturbation_test
from hybridoc.presets import example1, example2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-oracle", action="store_true")
    args = ap.parse_args()
    for prob, step in ((example1(), 1e-3), (example2(), 4e-3)):
        ext = solve(prob)
        print(f"{prob.name}: switching times {ext.switching_times}, J_opt = {ext.cost:.12f}")
        t0 = time.perf_counter()
        res = perturbation_test(ext, n=args.n, seed=args.seed)
        d = res.costs - ext.cost
        print(f"  {len(d)} perturbations: min {d.min():+.3e}, median {np.median(d):+.3e}, "
              f"negative {int(np.sum(d < -1e-8))} ({time.perf_counter() - t0:.1f} s)")
        if args.no_oracle:
            continue
        t0 = time.perf_counter()
        orc = brute_force(prob, step=step)
        print(f"  oracle: best {orc.cost:.12f} (resimulated {orc.resimulated_cost:.12f}) at switches "
              f"{tuple(round(t, 4) for t in orc.switch_times)}; {orc.evaluated} candidates, {orc.sweeps} sweeps, "
              f"best - J_opt {orc.cost - ext.cost:+.3e} ({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
