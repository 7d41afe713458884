"""Backward cost sensitivity vs central differences for random affine feedbacks.

    python3 scripts/sensitivity_study.py --count 10 --seed 1
"""
import argparse

import numpy as np

from hybridoc.cli import random_feedback, sensitivity_check
from hybridoc.presets import example1, example2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=5)
    ap.add_argument("--seed", type=int, default=20240607)
    ap.add_argument("--h", type=float, default=1e-5)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for prob in (example1(), example2()):
        for k in range(args.count):
            ctrl = random_feedback(prob, rng)
            times = (float(rng.uniform(0.2, 0.8)),) if prob.name == "example1" else ()
            g, fd, rel = sensitivity_check(prob, ctrl, times, h=args.h)
            print(f"{prob.name} #{k}: grad {np.array2string(g, precision=8)} fd {np.array2string(fd, precision=8)} "
                  f"rel {rel:.2e}")


if __name__ == "__main__":
    main()
