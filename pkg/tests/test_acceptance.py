"""Acceptance gate.

Each test checks one criterion at its stated tolerance, prints a
``CRITERION n: PASS|FAIL`` line (repeated in the terminal summary) and
then asserts.
"""
import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, timed_ex1_grids
from hybridoc.cli import random_feedback, sensitivity_check
from hybridoc.core import Box, CostSpec, HybridInput, HybridSystem, augment_state, manifold_value, to_mayer
from hybridoc.equivalence import compare
from hybridoc.hdp import GridSpec, estimate_lipschitz, hjb_residual, solve_hjb
from hybridoc.hmp import hamiltonian_gap, mayer_minimizers, solve
from hybridoc.oracle import brute_force, perturbation_test
from hybridoc.presets import example1, example2
from hybridoc.riccati import oscillator_instance, tanh_instance
from hybridoc.simulate import IntegratorConfig, evaluate_cost, integrate_segment, simulate


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# 1. cost sensitivity against central differences --------------------------------

def test_criterion_1_sensitivity():
    rng = np.random.default_rng(20240607)
    t0 = time.perf_counter()
    worst = {}
    for prob in (example1(), example2()):
        errs = []
        for _ in range(5):
            ctrl = random_feedback(prob, rng)
            times = (float(rng.uniform(0.2, 0.8)),) if prob.name == "example1" else ()
            _, _, rel = sensitivity_check(prob, ctrl, times, h=1e-5, cfg=IntegratorConfig(step=1e-4))
            errs.append(rel)
        worst[prob.name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed <= 30.0
    record(1, ok, f"worst relative error {worst['example1']:.2e} (ex1), {worst['example2']:.2e} (ex2) "
                  f"<= 1e-3; {elapsed:.1f} s <= 30 s")


# 2. adjoint equals value gradient ----------------------------------------------

def test_criterion_2_adjoint_gradient(ex1_extremal):
    # build times are those of the first build, wherever in the session it happened
    coarse, tc = timed_ex1_grids(1e-3)
    fine, tf_ = timed_ex1_grids(5e-4)
    t0 = time.perf_counter()
    rc = compare(ex1_extremal, coarse)
    rf = compare(ex1_extremal, fine)
    elapsed = tc + tf_ + (time.perf_counter() - t0)
    ratio = rc.max_rel / rf.max_rel
    ok = rc.max_rel <= 2e-2 and 1.6 <= ratio <= 2.6 and rc.coverage == 1.0 and elapsed <= 120.0
    record(2, ok, f"max rel |lam - grad V| {rc.max_rel:.3e} <= 2e-2 at 1e-3; refinement ratio {ratio:.2f} "
                  f"in [1.6, 2.6]; {elapsed:.1f} s <= 120 s")


# 3. Hamiltonian continuity -------------------------------------------------------

def test_criterion_3_hamiltonian_continuity(ex1_extremal, ex2_extremal):
    gaps = [abs(hamiltonian_gap(e, j)) for e in (ex1_extremal, ex2_extremal)
            for j in range(e.problem.n_switches)]
    sw = ex2_extremal.trajectory.switches[0]
    m = abs(manifold_value(ex2_extremal.problem.sys, sw.q_from, sw.q_to, sw.x_minus))
    ok = max(gaps) <= 1e-6 and m <= 1e-8
    record(3, ok, f"max |H(t_j-) - H(t_j+)| {max(gaps):.2e} <= 1e-6; |m(x(t_s-))| {m:.2e} <= 1e-8")


# 4. Riccati against the minimum principle ----------------------------------------

def test_criterion_4_riccati_hmp():
    lq = oscillator_instance()
    sol = lq.solve()
    e = solve(lq.to_problem())
    err = 0.0
    for i, (seg, lam) in enumerate(zip(e.trajectory.segments, e.adjoint_segments)):
        for k in range(len(seg.t)):
            err = max(err, float(np.abs(lam[:, k] - sol.adjoint(seg.t[k], seg.x[:, k], stage=i)).max()))
    sc = tanh_instance().solve()
    tt = np.linspace(0.0, 1.0, 1001)
    kerr = max(abs(sc.K(t)[0, 0] - math.tanh(1.0 - t)) for t in tt)
    ok = err <= 1e-6 and kerr <= 1e-8
    record(4, ok, f"max |lam - (Kx + s)| {err:.2e} <= 1e-6; max |K - tanh(tf - t)| {kerr:.2e} <= 1e-8")


# 5. local optimality --------------------------------------------------------------

def test_criterion_5_local_optimality(ex1_extremal, ex2_extremal):
    details, ok = [], True
    for e in (ex1_extremal, ex2_extremal):
        res = perturbation_test(e, n=200, seed=0)
        margin = float(np.min(res.costs) - e.cost)
        ok &= margin >= -1e-8 and len(res.costs) == 200
        details.append(f"{e.problem.name}: {len(res.costs)} perturbations, min J_pert - J_opt {margin:+.2e}")
    for e, step in ((ex1_extremal, 1e-3), (ex2_extremal, 4e-3)):
        orc = brute_force(e.problem, step=step)
        gap = orc.cost - e.cost
        ok &= gap >= -orc.allowance
        details.append(f"{e.problem.name}: oracle best - J_opt {gap:+.2e} >= -{orc.allowance:.0e}")
    record(5, ok, "; ".join(details))


# 6. Bolza and Mayer forms -----------------------------------------------------------

def random_inputs(prob, rng, k):
    """Seeded smooth open-loop inputs (and a random controlled switching time)."""
    out = []
    for _ in range(k):
        a, w, c = rng.uniform(-1.0, 1.0), rng.uniform(0.5, 4.0), rng.uniform(-0.5, 0.5)
        ctrl = (lambda a, w, c: lambda t, q, x: np.full((1,) + np.shape(x)[1:], a * np.sin(w * t) + c))(a, w, c)
        sched = tuple((float(rng.uniform(0.1, 0.9)), ev) for ev, kind in zip(prob.events, prob.kinds)
                      if kind == "controlled")
        out.append(HybridInput(ctrl, sched))
    return out


def test_criterion_6_bolza_mayer():
    rng = np.random.default_rng(6)
    worst, lead = 0.0, 0.0
    for prob in (example1(), example2()):
        hs, hc = to_mayer(prob.sys, prob.cost)
        for hin in random_inputs(prob, rng, 20):
            J = evaluate_cost(simulate(prob.sys, hin, prob.q0, prob.x0, prob.span), prob.cost, hin)
            xh = simulate(hs, hin, prob.q0, augment_state(prob.x0), prob.span).final_state
            worst = max(worst, abs(hc.terminal_cost(xh) - J))
        mp = dataclasses.replace(prob, sys=hs, cost=hc, x0=augment_state(prob.x0),
                                 minimizers=mayer_minimizers(prob.minimizers))
        e = solve(mp)
        lead = max(lead, max(float(np.abs(lam[0] - 1.0).max()) for lam in e.adjoint_segments))
    ok = worst <= 1e-8 and lead <= 1e-9
    record(6, ok, f"max |g_hat - J_Bolza| {worst:.2e} <= 1e-8 over 40 inputs; "
                  f"max |lam_hat_0 - 1| {lead:.2e} <= 1e-9")


# 7. HJB scheme ---------------------------------------------------------------------

DRIFT = HybridSystem({"q": 1}, {"q": lambda x, u: u + 0.0 * x}, {"q": Box([-1.0], [1.0])})


def continuation_residuals(prob, stack, j, t_range, region, rng, n=200):
    """|hjb_residual| at random points of stage ``j`` where continuing beats switching now."""
    out = []
    nxt = prob.q_sequence[j + 1] if j + 1 < len(prob.q_sequence) else None
    controlled = nxt is not None and prob.kinds[j] == "controlled"
    while len(out) < n:
        t = rng.uniform(*t_range)
        x = rng.uniform(*region)
        if controlled:
            sigma = prob.events[j]
            xp = prob.sys.jump_map(sigma)(np.asarray(x, float))
            v_switch = stack[j + 1].interpolate(t, xp) + prob.cost.switch_cost(sigma, np.asarray(x, float))
            if stack[j].interpolate(t, x) >= v_switch - 1e-9:
                continue
        out.append(abs(hjb_residual(prob.sys, prob.cost, stack[j], t, x)))
    return np.array(out)


def test_criterion_7_hjb_scheme(ex1, ex2, ex2_stack):
    d = 1e-2
    g = solve_hjb(DRIFT, CostSpec(terminal=lambda x: np.abs(x[0])), ["q"], GridSpec((-2.0,), (2.0,), d, d),
                  (0.0, 1.0))[0]
    exact = np.maximum(np.abs(g.x_nodes[0])[None] - (1.0 - g.t_nodes)[:, None], 0.0)
    cf_err = float(np.abs(g.values - exact).max())
    ok = cf_err <= 2 * d

    rng = np.random.default_rng(7)
    coarse = timed_ex1_grids(1e-3)[0]
    med = {}
    for name, prob, stack, h, parts in (
            ("ex1", ex1, coarse, 2e-3, [((0.0, 0.99), ((0.5,), (2.0,))), ((0.0, 0.99), ((-2.0,), (-0.4,)))]),
            ("ex2", ex2, ex2_stack, 2.5e-2 + 2.5e-3,
             [((0.0, 3.9), ((-0.3, 0.1), (0.8, 1.0))), ((0.0, 3.9), ((0.0, -0.3), (2.0, 1.0)))])):
        for j, (tr, region) in enumerate(parts):
            m = float(np.median(continuation_residuals(prob, stack, j, tr, region, rng)))
            med[f"{name} stage {j}"] = m
            ok &= m <= 5 * h

    # monotone scheme: raising terminal node values never lowers any value,
    # and raises none by more than the largest raise
    spec = GridSpec((-2.0,), (2.0,), 4e-2, 4e-2)
    base = solve_hjb(DRIFT, CostSpec(terminal=lambda x: np.abs(x[0])), ["q"], spec, (0.0, 1.0))[0]
    nodes = base.x_nodes[0]
    mono = True
    for _ in range(10):
        raise_ = np.where(rng.random(len(nodes)) < 0.3, rng.uniform(0.0, 0.5, len(nodes)), 0.0)
        up = solve_hjb(DRIFT, CostSpec(terminal=(lambda r: lambda x: np.abs(x[0]) + np.interp(x[0], nodes, r))(raise_)),
                       ["q"], spec, (0.0, 1.0))[0]
        diff = up.values - base.values
        mono &= diff.min() >= -1e-12 and diff.max() <= raise_.max() + 1e-12
    ok &= mono
    meds = ", ".join(f"{k} {v:.2e}" for k, v in med.items())
    record(7, ok, f"closed-form max error {cf_err:.2e} <= {2 * d:.0e}; median |residual| {meds} "
                  f"(<= 5(dx + dt)); monotone on 10 random raises: {mono}")


# 8. Lipschitz constant under refinement ----------------------------------------------

def test_criterion_8_lipschitz(ex1_extremal):
    ts = ex1_extremal.switching_times[0]
    parts = [(0, ((0.5,), (2.0,)), (0.0, ts)), (1, ((-2.0,), (-0.4,)), (ts, 1.0))]
    ks = {}
    for d in (1e-3, 5e-4):
        stack = timed_ex1_grids(d)[0]
        ks[d] = [estimate_lipschitz(stack[j], region, tr) for j, region, tr in parts]
    changes = [abs(b - a) / a for a, b in zip(ks[1e-3], ks[5e-4])]
    ok = all(np.isfinite(k) for k in ks[1e-3] + ks[5e-4]) and max(changes) <= 0.10
    record(8, ok, "K_hat per segment " + ", ".join(f"{a:.4f} -> {b:.4f}" for a, b in zip(ks[1e-3], ks[5e-4]))
           + f"; max change {max(changes):.2%} <= 10%")


# 9. simulator -------------------------------------------------------------------------

def test_criterion_9_simulator():
    p = example2()
    hin = HybridInput.constant(np.zeros(1))
    a = simulate(p.sys, hin, p.q0, p.x0, p.span)
    b = simulate(p.sys, hin, p.q0, p.x0, p.span)
    same = all(np.array_equal(sa.x, sb.x) and np.array_equal(sa.t, sb.t) for sa, sb in zip(a.segments, b.segments))
    same &= [s.t for s in a.switches] == [s.t for s in b.switches]
    zero = lambda t, x: np.zeros((1,) + np.shape(x)[1:])
    errs = [abs(integrate_segment(lambda x, u: x, np.array([1.0]), zero, (0.0, 1.0),
                                  IntegratorConfig(step=h)).x[0, -1] - math.e) for h in (0.1, 0.05, 0.025)]
    order = min(math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2]))
    cross = abs(a.switches[0].t - math.pi / 2)
    ok = same and order >= 3.9 and cross <= 1e-8
    record(9, ok, f"bit-identical reruns: {same}; RK4 order {order:.3f} >= 3.9; |t* - pi/2| {cross:.2e} <= 1e-8")
