"""Riccati feedback vs minimum-principle adjoint on the oscillator LQ instance, and root multiplicity.

    python3 scripts/riccati_agreement.py
"""
import numpy as np

from hybridoc.hmp import solve
from hybridoc.riccati import multistart_roots, oscillator_instance, switch_condition_residual


def main():
    lq = oscillator_instance()
    sol = lq.solve()
    ext = solve(lq.to_problem())
    err = 0.0
    for i, (seg, lam) in enumerate(zip(ext.trajectory.segments, ext.adjoint_segments)):
        for k in range(len(seg.t)):
            err = max(err, float(np.abs(lam[:, k] - sol.adjoint(seg.t[k], seg.x[:, k], stage=i)).max()))
    rec = sol.switch_records[0]
    print(f"Riccati: t_s = {rec['t']:.10f}, p = {rec['p']:.8f}, J = {sol.cost_value():.12f}, "
          f"switch residual {switch_condition_residual(sol, 0):.2e}")
    print(f"HMP:     t_s = {ext.switching_times[0]:.10f}, p = {ext.p_values[0]:.8f}, J = {ext.cost:.12f}")
    print(f"max |lam - (K x + s)| = {err:.3e}")
    guesses = [(g,) for g in (0.8, 1.5, 2.4, 3.0, 3.6)]
    roots, multiple = multistart_roots(lq.sys, lq.cost, lq.q0, lq.events, lq.x0, lq.span, guesses,
                                       [(0.0,)] * len(guesses))
    for times, ps, J in roots:
        print(f"root: t_s = {times[0]:.8f}, p = {ps[0]:+.6f}, J = {J:.10f}")
    print("several roots" if multiple else "single root")


if __name__ == "__main__":
    main()
