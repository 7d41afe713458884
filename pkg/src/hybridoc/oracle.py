"""Search baselines for checking optimality claims.

Two independent checks on a computed optimum:

* :func:`brute_force` searches switching times on a fixed grid and
  piecewise-constant controls whose levels are quantised on the control box.
  Every candidate is a feasible input, so no candidate may be cheaper than
  the true optimum.
* :func:`perturbation_test` re-simulates an extremal under seeded random
  switch-time shifts and control bumps.

The exhaustive product of all level combinations is far too large (33
levels on 20 pieces), so :func:`brute_force` runs an exhaustive scan of
switching time and constant level followed by coordinate sweeps over the
pieces, each sweep evaluating every level of one piece jointly with switch
times near the incumbent.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import AUTONOMOUS, HybridError, HybridInput, HybridProblem
from .simulate import IntegratorConfig, _eval_manifold, evaluate_cost, simulate


@dataclass
class OracleResult:
    """Best candidate found by :func:`brute_force`.

    ``controlled_times`` are the searched switching times; ``switch_times``
    lists every switch of the re-simulated best candidate, whose cost under
    :func:`simulate` is ``resimulated_cost``.
    """

    cost: float
    controlled_times: tuple
    levels: np.ndarray  # (pieces, m)
    piece_times: np.ndarray
    evaluated: int
    sweeps: int
    allowance: float
    history: list = field(default_factory=list)
    switch_times: tuple = ()
    resimulated_cost: float = float("nan")

    def hybrid_input(self, problem: HybridProblem) -> HybridInput:
        """The best candidate as an input for :func:`simulate`."""
        events = [problem.events[j] for j in range(problem.n_switches) if problem.kinds[j] != AUTONOMOUS]
        return HybridInput.piecewise_constant(self.piece_times, self.levels,
                                              tuple(zip(self.controlled_times, events)))


class BatchEvaluator:
    """Cost of many piecewise-constant candidates integrated in lockstep.

    RK4 with step ``h`` on the uniform grid; piece boundaries and controlled
    switching times must lie on the grid.  The running cost is integrated as
    an extra state.  An autonomous crossing inside a step is located on the
    cubic Hermite interpolant of the step, the jump is applied and the rest
    of the step is integrated in the new location.  Candidates that do not
    complete the location sequence get cost ``inf``.
    """

    def __init__(self, problem: HybridProblem, pieces: int, step: float):
        self.prob = problem
        sys = problem.sys
        self.qs = problem.q_sequence
        dims = {sys.state_dims[q] for q in self.qs}
        if len(dims) != 1:
            raise HybridError("the batch evaluator needs one state dimension across the location sequence")
        self.n = dims.pop()
        self.m = sys.control_dim(self.qs[0])
        span = problem.tf - problem.t0
        self.N = int(round(span / step))
        if abs(self.N * step - span) > 1e-9 * span:
            raise ValueError("step must divide the horizon")
        self.h = span / self.N
        if self.N % pieces:
            raise ValueError("pieces must divide the number of steps")
        self.pieces = pieces
        self.per_piece = self.N // pieces
        self.piece_times = problem.t0 + self.h * self.per_piece * np.arange(pieces)

    def time_index(self, t) -> np.ndarray:
        return np.rint((np.asarray(t, dtype=float) - self.prob.t0) / self.h).astype(int)

    def _rk4(self, q, X, Z, U, h):
        sys, cost = self.prob.sys, self.prob.cost
        f = sys.vector_fields[q]

        def rhs(x):
            return np.asarray(f(x, U), dtype=float), np.asarray(cost.running_cost(q, x, U), dtype=float)

        k1, l1 = rhs(X)
        k2, l2 = rhs(X + 0.5 * h * k1)
        k3, l3 = rhs(X + 0.5 * h * k2)
        k4, l4 = rhs(X + h * k3)
        Xn = X + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        Zn = Z + (h / 6.0) * (l1 + 2.0 * (l2 + l3) + l4)
        return Xn, Zn, k1, l1

    def costs(self, switch_idx, levels) -> np.ndarray:
        """Costs of ``B`` candidates.

        Args:
            switch_idx: (B, L) grid indices of the switching times; ignored
                for autonomous switches.
            levels: (B, pieces, m) control levels.
        """
        prob, sys, cost = self.prob, self.prob.sys, self.prob.cost
        levels = np.asarray(levels, dtype=float)
        B = levels.shape[0]
        L = len(self.qs) - 1
        switch_idx = np.asarray(switch_idx, dtype=int).reshape(B, -1)
        if switch_idx.shape[1] < L:
            # autonomous switches need no index; columns follow switch order
            full = np.full((B, L), -1, dtype=int)
            ctrl = [j for j in range(L) if prob.kinds[j] != AUTONOMOUS]
            full[:, ctrl] = switch_idx[:, :len(ctrl)]
            switch_idx = full
        X = np.repeat(prob.x0[:, None], B, axis=1)
        Z = np.zeros(B)
        S = np.zeros(B, dtype=int)
        ctrl_switches = [j for j in range(L) if prob.kinds[j] != AUTONOMOUS]
        for k in range(self.N):
            # controlled switches scheduled at this knot
            for j in ctrl_switches:
                cols = np.nonzero((switch_idx[:, j] == k) & (S == j))[0]
                for b in cols:
                    Z[b] += cost.switch_cost(prob.events[j], X[:, b])
                    X[:, b] = sys.jump_map(prob.events[j])(X[:, b])
                S[cols] += 1
            U = levels[:, k // self.per_piece, :].T
            for s, cols in [(s, np.nonzero(S == s)[0]) for s in np.unique(S)]:
                q = self.qs[s]
                Xs, Zs, Us = X[:, cols], Z[cols], U[:, cols]
                Xn, Zn, k1, l1 = self._rk4(q, Xs, Zs, Us, self.h)
                if s < L and prob.kinds[s] == AUTONOMOUS:
                    Xn, Zn = self._crossings(s, cols, Xs, Zs, Us, Xn, Zn, k1, l1, S)
                X[:, cols], Z[cols] = Xn, Zn
        bad = ~np.all(np.isfinite(X), axis=0) | (S != L)
        out = np.full(B, np.inf)
        for b in np.nonzero(~bad)[0]:
            out[b] = Z[b] + cost.terminal_cost(X[:, b])
        return out

    def _crossings(self, s, cols, Xs, Zs, Us, Xn, Zn, k1, l1, S):
        prob, sys, cost = self.prob, self.prob.sys, self.prob.cost
        q, r = self.qs[s], self.qs[s + 1]
        man = sys.manifolds[(q, r)]
        m0 = _eval_manifold(man, Xs)
        m1 = _eval_manifold(man, Xn)
        hit = np.nonzero((m0 * m1 < 0) | ((m1 == 0) & (m0 != 0)))[0]
        if not len(hit):
            return Xn, Zn
        h = self.h
        f = sys.vector_fields[q]
        x0, x1 = Xs[:, hit], Xn[:, hit]
        u = Us[:, hit]
        d0 = k1[:, hit]
        d1 = np.asarray(f(x1, u), dtype=float)
        z0, z1 = Zs[hit], Zn[hit]
        c0 = l1[hit]
        c1 = np.asarray(cost.running_cost(q, x1, u), dtype=float)

        def herm(th, a, b, da, db):
            h00 = 2 * th ** 3 - 3 * th ** 2 + 1
            h10 = th ** 3 - 2 * th ** 2 + th
            h01 = -2 * th ** 3 + 3 * th ** 2
            h11 = th ** 3 - th ** 2
            return h00 * a + h10 * h * da + h01 * b + h11 * h * db

        lo, hi = np.zeros(len(hit)), np.ones(len(hit))
        mlo = m0[hit]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            xm = herm(mid, x0, x1, d0, d1)
            mm = _eval_manifold(man, xm)
            same = np.sign(mm) == np.sign(mlo)
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        th = 0.5 * (lo + hi)
        xs = herm(th, x0, x1, d0, d1)
        zs = herm(th, z0, z1, c0, c1)
        sigma = prob.events[s]
        jm = sys.jump_map(sigma)
        xp = np.empty_like(xs)
        for i in range(len(hit)):
            zs[i] += cost.switch_cost(sigma, xs[:, i])
            xp[:, i] = jm(xs[:, i])
        rest = (1.0 - th) * h
        Xr, Zr, _, _ = self._rk4(r, xp, zs, u, rest)
        Xn = Xn.copy()
        Zn = Zn.copy()
        Xn[:, hit], Zn[hit] = Xr, Zr
        S[cols[hit]] += 1
        return Xn, Zn


def _levels(problem: HybridProblem, du: float) -> np.ndarray:
    box = problem.sys.control_sets[problem.q0]
    axes = []
    for lo, hi in zip(box.lower, box.upper):
        k = int(np.floor((hi - lo) / du + 1e-9))
        axes.append(lo + du * np.arange(k + 1))
    return np.array(list(itertools.product(*axes)))  # (nl, m)


def brute_force(problem: HybridProblem, pieces: int = 20, du: float = 0.25, n_times: int = 200,
                step: float = 1e-3, max_sweeps: int = 10, window: int = 10, allowance: float = 1e-6) -> OracleResult:
    """Discrete search over switching times and piecewise-constant controls.

    Controlled switching times range over ``n_times`` grid instants evenly
    spread inside the horizon (autonomous switches are placed by the
    manifolds).  Control levels are the points ``lower + k du`` of the box.
    ``allowance`` bounds the integration error of a candidate's cost.
    """
    ev = BatchEvaluator(problem, pieces, step)
    L = problem.n_switches
    ctrl = [j for j in range(L) if problem.kinds[j] != AUTONOMOUS]
    if len(ctrl) > 1:
        raise NotImplementedError("the oracle searches at most one controlled switching time")
    levels = _levels(problem, du)
    nl = len(levels)
    t_grid = np.unique(ev.time_index(np.linspace(problem.t0, problem.tf, n_times + 2)[1:-1]))
    t_grid = t_grid[(t_grid > 0) & (t_grid < ev.N)]
    evaluated = 0
    history = []

    def run(S, U):
        nonlocal evaluated
        evaluated += len(U)
        return ev.costs(S, U)

    # exhaustive scan: switching time x constant level
    if ctrl:
        S = np.repeat(t_grid, nl)[:, None]
        U = np.tile(levels, (len(t_grid), 1))[:, None, :].repeat(pieces, axis=1)
    else:
        S = np.zeros((nl, 0), dtype=int)
        U = levels[:, None, :].repeat(pieces, axis=1)
    J = run(S, U)
    b = int(np.argmin(J))
    best_J, best_S, best_U = float(J[b]), S[b].copy(), U[b].copy()
    history.append(best_J)

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        before = best_J
        if ctrl:
            S = t_grid[:, None]
            U = np.repeat(best_U[None], len(t_grid), axis=0)
            J = run(S, U)
            b = int(np.argmin(J))
            if J[b] < best_J:
                best_J, best_S = float(J[b]), S[b].copy()
        for i in range(pieces):
            if ctrl:
                pos = int(np.searchsorted(t_grid, best_S[0]))
                near = t_grid[max(0, pos - window): pos + window + 1]
            else:
                near = np.zeros(1, dtype=int)
            U = np.repeat(best_U[None], nl * len(near), axis=0)
            U[:, i, :] = np.tile(levels, (len(near), 1))
            S = np.repeat(near, nl)[:, None] if ctrl else np.zeros((len(U), 0), dtype=int)
            J = run(S, U)
            b = int(np.argmin(J))
            if J[b] < best_J:
                best_J, best_S, best_U = float(J[b]), S[b].copy(), U[b].copy()
        history.append(best_J)
        if before - best_J <= 1e-12:
            break

    times = tuple(problem.t0 + ev.h * int(v) for v in best_S)
    res = OracleResult(best_J, times, best_U, ev.piece_times, evaluated, sweeps, allowance, history)
    hin = res.hybrid_input(problem)
    traj = simulate(problem.sys, hin, problem.q0, problem.x0, problem.span, IntegratorConfig(step=ev.h))
    res.switch_times = tuple(sw.t for sw in traj.switches)
    res.resimulated_cost = float(evaluate_cost(traj, problem.cost, hin))
    return res


@dataclass
class PerturbationResult:
    reference: float
    costs: np.ndarray
    shifts: np.ndarray  # (K, controlled switches)
    bumps: np.ndarray  # (K, 3) start, end, amplitude

    @property
    def worst_margin(self) -> float:
        """Smallest ``J_pert - J_ref`` (negative means a cheaper perturbation)."""
        return float(np.min(self.costs - self.reference))


def perturbation_test(extremal, n: int = 200, seed: int = 0, max_shift: float = 0.05, max_bump: float = 0.1,
                      cfg: IntegratorConfig = IntegratorConfig()) -> PerturbationResult:
    """Costs of seeded random admissible perturbations of an extremal.

    Each perturbation shifts every controlled switching time by up to
    ``max_shift`` and adds a constant of amplitude up to ``max_bump`` to the
    control on a random subinterval (projected onto the control box).  The
    reference cost re-simulates the unperturbed extremal input with the same
    integrator so both sides carry the same discretisation.
    """
    prob = extremal.problem
    base = extremal.control_input()
    rng = np.random.default_rng(seed)
    J_ref = evaluate_cost(simulate(prob.sys, base, prob.q0, prob.x0, prob.span, cfg), prob.cost, base)
    ctrl = [j for j in range(prob.n_switches) if prob.kinds[j] != AUTONOMOUS]
    sw_t = np.array([extremal.trajectory.switches[j].t for j in ctrl])
    box_lo = {q: prob.sys.control_sets[q].lower for q in prob.q_sequence}
    box_hi = {q: prob.sys.control_sets[q].upper for q in prob.q_sequence}
    t0, tf = prob.span
    costs, shifts, bumps = [], [], []
    for _ in range(n):
        dt = rng.uniform(-max_shift, max_shift, len(ctrl))
        times = sw_t + dt
        a, b = np.sort(rng.uniform(t0, tf, 2))
        amp = rng.uniform(-max_bump, max_bump)
        hin = _perturbed_input(base, prob, ctrl, times, a, b, amp, box_lo, box_hi)
        traj = simulate(prob.sys, hin, prob.q0, prob.x0, prob.span, cfg)
        if traj.discrete_path != prob.q_sequence:
            continue
        costs.append(evaluate_cost(traj, prob.cost, hin))
        shifts.append(dt)
        bumps.append((a, b, amp))
    return PerturbationResult(float(J_ref), np.array(costs), np.array(shifts).reshape(len(costs), len(ctrl)),
                              np.array(bumps).reshape(len(costs), 3))


def _perturbed_input(base, prob, ctrl, times, a, b, amp, lo, hi):
    base_ctrl = base.control

    def control(t, q, x):
        u = np.asarray(base_ctrl(t, q, x), dtype=float)
        inside = (np.asarray(t) >= a) & (np.asarray(t) < b)
        u = u + amp * inside
        return np.clip(u, lo[q].reshape((-1,) + (1,) * (u.ndim - 1)), hi[q].reshape((-1,) + (1,) * (u.ndim - 1)))

    sched = tuple((float(t), prob.events[j]) for t, j in zip(times, ctrl))
    bp = tuple(sorted(set(base.breakpoints) | {a, b} | set(float(t) for t in times)))
    bp = tuple(t for t in bp if prob.t0 < t < prob.tf)
    return HybridInput(control, sched, bp)
