"""Hybrid minimum principle: Hamiltonians, adjoint integration and shooting.

The two-point boundary value problem (state forward from ``x0``, adjoint
backward from ``grad g``, jump conditions and Hamiltonian continuity at
switches, manifold membership at autonomous switches) is solved by
multiple shooting.  Unknowns are the initial adjoint, state and adjoint at
the start of every later segment (and at optional interior nodes), the
switching times and the ``p`` multipliers of autonomous switches.
"""
from __future__ import annotations

import bisect

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import (
    AUTONOMOUS,
    IDENTITY,
    CostSpec,
    HybridError,
    HybridInput,
    HybridProblem,
    HybridSystem,
    HybridTrajectory,
    Segment,
    SwitchRecord,
    as_batch,
    jump,
)
from .newton import newton
from .simulate import BlowUpError, IntegratorConfig, simulate

HmpProblem = HybridProblem

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class HmpConfig:
    """Shooting settings.

    ``step`` is the RK4 step inside shooting intervals, ``tol`` the sup-norm
    residual target, ``sweeps`` the number of damped forward/backward
    passes used to build the initial node values.
    """

    step: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 100
    fd_step: float = 1e-6
    nodes_per_segment: int = 1
    sweeps: int = 3
    damping: float = 0.5


def hamiltonian(q, x, lam, u, cost: CostSpec, sys: HybridSystem):
    """``lam . f_q(x, u) + l_q(x, u)``; batched inputs give a batched result."""
    f = sys.field(q, x, u)
    val = np.sum(np.asarray(lam) * f, axis=0) + cost.running_cost(q, x, u)
    return float(val) if np.ndim(val) == 0 else val


def golden_section(fun, lo, hi, tol=1e-10, max_iter=200):
    """Vectorised golden-section minimisation of ``fun`` over ``[lo, hi]``.

    ``lo``/``hi`` are arrays; ``fun`` maps an array of candidates to values
    of the same shape.  The box end points are compared at the end so that
    boundary minimisers are returned exactly.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    a, b = lo.copy(), hi.copy()
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol):
            break
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new = np.where(left, b - INV_PHI * (b - a), a + INV_PHI * (b - a))
        fnew = fun(new)
        c, d = np.where(left, new, d), np.where(left, c, new)
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
    mid = 0.5 * (a + b)
    cands = np.stack([mid, lo, hi])
    vals = np.stack([fun(mid), fun(lo), fun(hi)])
    return np.take_along_axis(cands, np.argmin(vals, axis=0)[None], axis=0)[0]


def control_minimizer(sys: HybridSystem, cost: CostSpec, q: str, closed_form: Optional[Callable] = None):
    """Batched map ``(x, lam) -> u`` minimising the Hamiltonian of ``q``.

    A closed form is projected onto the box; without one, coordinate
    descent with golden-section line searches (three sweeps from the box
    centre) is used.
    """
    box = sys.control_sets[q]
    m = box.dim

    if closed_form is not None:
        def umin(x, lam):
            u = np.asarray(closed_form(x, lam), dtype=float)
            if u.shape != (m,) + np.shape(x)[1:]:
                u = np.array(as_batch(u, (m,), np.shape(x)[1:]))
            return box.project(u)
        return umin

    def umin(x, lam):
        batch = np.shape(x)[1:]
        u = np.array(as_batch(box.center, (m,), batch))
        for _ in range(3):
            for i in range(m):
                def h_axis(v, i=i):
                    uu = u.copy()
                    uu[i] = v
                    return hamiltonian(q, x, lam, uu, cost, sys)
                lo = np.full(batch, box.lower[i])
                hi = np.full(batch, box.upper[i])
                u[i] = golden_section(h_axis, lo, hi)
        return u

    return umin


def minimize_hamiltonian(q, x, lam, cost: CostSpec, sys: HybridSystem, closed_form: Optional[Callable] = None):
    """Pointwise minimiser ``u`` of ``H_q(x, lam, .)`` over the control box."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    u = control_minimizer(sys, cost, q, closed_form)(x[:, None], lam[:, None])
    return u[:, 0]


def adjoint_rhs(sys, cost, q, x, lam, u):
    """``-(df/dx)^T lam - dl/dx`` (batched)."""
    A = sys.jacobian_x(q, x, u, broadcast=False)
    return -np.einsum("ij...,i...->j...", A, lam) - cost.running_grad_x(q, x, u)


def adjoint_backward(sys: HybridSystem, cost: CostSpec, segment: Segment, lam_end, umin: Optional[Callable] = None):
    """Backward RK4 for the adjoint along a frozen state segment.

    The control is re-minimised at every stage with ``umin(x, lam)``
    (defaults to the generic minimiser of the segment's location).  Stage
    states come from the segment's Hermite interpolant.

    Returns:
        adjoint values at the segment knots, shape ``(n, K)``.
    """
    q = segment.q
    if umin is None:
        umin = control_minimizer(sys, cost, q)
    t = segment.t
    K = len(t)
    n = segment.dim
    lam = np.empty((n, K))
    lam[:, -1] = np.asarray(lam_end, dtype=float)
    if K == 1:
        return lam
    _, xm = segment.midpoints()
    X = segment.x

    def rhs(x, l):
        return adjoint_rhs(sys, cost, q, x, l, umin(x, l))

    cur = lam[:, -1:].copy()
    for k in range(K - 2, -1, -1):
        h = t[k + 1] - t[k]
        xe, xmid, xs = X[:, k + 1:k + 2], xm[:, k:k + 1], X[:, k:k + 1]
        s1 = rhs(xe, cur)
        s2 = rhs(xmid, cur - 0.5 * h * s1)
        s3 = rhs(xmid, cur - 0.5 * h * s2)
        s4 = rhs(xs, cur - h * s3)
        cur = cur - (h / 6.0) * (s1 + 2.0 * (s2 + s3) + s4)
        if not np.all(np.isfinite(cur)):
            raise BlowUpError(float(t[k]), "adjoint")
        lam[:, k] = cur[:, 0]
    return lam


def adjoint_switch_condition(lam_plus, x_minus, sigma, p, cost: CostSpec, sys: HybridSystem,
                             q_from: Optional[str] = None, kind: Optional[str] = None):
    """Adjoint just before a switch.

    ``lam(t_j-) = dxi^T lam(t_j+) + grad c(x-) + p grad m(x-)``.  The
    manifold term needs ``q_from``; it is dropped for controlled switches
    (``p`` must then be zero).
    """
    lam_plus = np.asarray(lam_plus, dtype=float)
    x_minus = np.asarray(x_minus, dtype=float)
    if sigma == IDENTITY:
        G = np.eye(len(x_minus))
    else:
        G = sys.jump_map(sigma).jac(x_minus)
    if G.shape != (len(lam_plus), len(x_minus)):
        raise ValueError(f"jump Jacobian has shape {G.shape}, expected {(len(lam_plus), len(x_minus))}")
    lam = G.T @ lam_plus + cost.switch_grad(sigma, x_minus)
    man = None
    if q_from is not None:
        man = sys.manifolds.get((q_from, sys.transition(q_from, sigma)))
    if kind == AUTONOMOUS and man is None:
        raise HybridError(f"autonomous switch {sigma} from {q_from} has no manifold gradient")
    if man is not None and kind != "controlled":
        lam = lam + p * man.gradient(x_minus)
    elif p != 0:
        raise HybridError("a nonzero p needs the manifold of an autonomous switch")
    return lam


@dataclass
class HmpExtremal:
    """Candidate optimum returned by :func:`solve`.

    ``adjoint_segments[i]`` and ``controls[i]`` are sampled on the knots of
    ``trajectory.segments[i]``.  ``p_values`` maps switch index to ``p`` for
    autonomous switches only.
    """

    trajectory: HybridTrajectory
    adjoint_segments: list
    p_values: dict
    controls: list
    switching_times: tuple
    residual_norm: float
    cost: float
    iterations: int
    problem: HybridProblem
    midpoint_controls: list = None

    def adjoint(self, t: float, side: str = "right") -> np.ndarray:
        i = self.trajectory.segment_index(t, side)
        seg = self.trajectory.segments[i]
        lam = self.adjoint_segments[i]
        return np.array([np.interp(t, seg.t, row) for row in lam])

    def control_input(self) -> HybridInput:
        """Open-loop input reproducing the extremal control (for re-simulation).

        Controlled switches keep their times; autonomous ones are left to
        the manifolds.
        """
        segs = self.trajectory.segments
        tabs = []
        for seg, u, um in zip(segs, self.controls, self.midpoint_controls):
            tm, _ = seg.midpoints()
            tt = np.empty(2 * len(seg.t) - 1)
            tt[0::2], tt[1::2] = seg.t, tm
            uu = np.empty((u.shape[0], len(tt)))
            uu[:, 0::2], uu[:, 1::2] = u, um
            tabs.append((tt, uu))
        starts = np.array([seg.t_start for seg in segs])
        start_list = starts.tolist()

        def control(t, q, x):
            scalar = np.ndim(t) == 0
            if scalar:
                i = min(max(bisect.bisect_right(start_list, t) - 1, 0), len(segs) - 1)
                ts, us = tabs[i]
                u = np.array([np.interp(t, ts, row) for row in us])
                batch = np.shape(x)[1:]
                if len(batch) == 1:
                    out = np.empty((len(u),) + batch)
                    out[...] = u[:, None]
                    return out
                return as_batch(u, u.shape, batch).copy()
            tt = np.atleast_1d(t)
            idx = np.clip(np.searchsorted(starts, tt, side="right") - 1, 0, len(segs) - 1)
            out = np.empty((tabs[0][1].shape[0], len(tt)))
            for i in np.unique(idx):
                sel = idx == i
                ts, us = tabs[i]
                for r in range(us.shape[0]):
                    out[r, sel] = np.interp(tt[sel], ts, us[r])
            if scalar:
                return as_batch(out[:, 0], (out.shape[0],), np.shape(x)[1:]).copy()
            return out

        prob = self.problem
        sched = [(sw.t, sw.sigma) for sw, kind in zip(self.trajectory.switches, prob.kinds) if kind != AUTONOMOUS]
        return HybridInput(control, tuple(sched), tuple(s.t for s in self.trajectory.switches))


def hamiltonian_gap(extremal: HmpExtremal, j: int) -> float:
    """``H(t_j-) - H(t_j+)`` at switch ``j`` (0-based), each side with its own minimised control."""
    prob = extremal.problem
    traj = extremal.trajectory
    left, right = traj.segments[j], traj.segments[j + 1]
    lam_l = extremal.adjoint_segments[j][:, -1]
    lam_r = extremal.adjoint_segments[j + 1][:, 0]
    ql, qr = left.q, right.q
    ul = minimize_hamiltonian(ql, left.x[:, -1], lam_l, prob.cost, prob.sys, prob.minimizers.get(ql))
    ur = minimize_hamiltonian(qr, right.x[:, 0], lam_r, prob.cost, prob.sys, prob.minimizers.get(qr))
    return (hamiltonian(ql, left.x[:, -1], lam_l, ul, prob.cost, prob.sys)
            - hamiltonian(qr, right.x[:, 0], lam_r, ur, prob.cost, prob.sys))


class _Shooter:
    """Residual map of the multiple-shooting formulation."""

    def __init__(self, prob: HybridProblem, cfg: HmpConfig):
        self.prob = prob
        self.cfg = cfg
        self.sys = prob.sys
        self.cost = prob.cost
        self.qs = prob.q_sequence
        self.L = prob.n_switches
        self.M = max(1, int(cfg.nodes_per_segment))
        self.dims = [self.sys.state_dims[q] for q in self.qs]
        self.umin = {q: control_minimizer(self.sys, self.cost, q, prob.minimizers.get(q)) for q in set(self.qs)}
        self.aut = prob.autonomous_indices()
        # layout of the unknown vector
        off = 0
        self.slots = {}
        for i, n in enumerate(self.dims):
            for j in range(self.M):
                if i == 0 and j == 0:
                    self.slots[(0, 0)] = (None, slice(off, off + n))
                    off += n
                else:
                    self.slots[(i, j)] = (slice(off, off + n), slice(off + n, off + 2 * n))
                    off += 2 * n
        self.t_slice = slice(off, off + self.L)
        off += self.L
        self.p_slice = slice(off, off + len(self.aut))
        off += len(self.aut)
        self.size = off
        self.N = None

    # -- packing -----------------------------------------------------------
    def times(self, Z):
        B = Z.shape[1]
        T = [np.full(B, self.prob.t0)]
        T += [Z[self.t_slice][j] for j in range(self.L)]
        T.append(np.full(B, self.prob.tf))
        return T

    def p_of(self, Z, j):
        if j in self.aut:
            return Z[self.p_slice][self.aut.index(j)]
        return np.zeros(Z.shape[1])

    def node(self, Z, i, j):
        xs, ls = self.slots[(i, j)]
        if xs is None:
            X = np.repeat(self.prob.x0[:, None], Z.shape[1], axis=1)
        else:
            X = Z[xs]
        return X, Z[ls]

    def set_steps(self, z):
        T = self.times(z[:, None])
        self.N = [max(4, int(math.ceil((T[i + 1][0] - T[i][0]) / self.M / self.cfg.step - 1e-9)))
                  for i in range(self.L + 1)]

    # -- integration -------------------------------------------------------
    def _rhs(self, q, X, Lam):
        U = self.umin[q](X, Lam)
        F = np.asarray(self.sys.field(q, X, U), dtype=float)
        G = adjoint_rhs(self.sys, self.cost, q, X, Lam, U)
        return F, G, U

    def integrate(self, q, X, Lam, dt, N, record=False):
        """``N`` RK4 steps of length ``dt`` (per column) of the joint system."""
        X = X.copy()
        Lam = Lam.copy()
        rec = None
        if record:
            n = X.shape[0]
            m = self.sys.control_dim(q)
            rec = dict(x=np.empty((n, N + 1)), lam=np.empty((n, N + 1)), d0=np.empty((n, N)), d1=np.empty((n, N)),
                       u0=np.empty((m, N)), u1=np.empty((m, N)), z=np.zeros(N + 1))
            rec["x"][:, 0], rec["lam"][:, 0] = X[:, 0], Lam[:, 0]
        for k in range(N):
            f1, g1, u1_ = self._rhs(q, X, Lam)
            f2, g2, _ = self._rhs(q, X + 0.5 * dt * f1, Lam + 0.5 * dt * g1)
            f3, g3, _ = self._rhs(q, X + 0.5 * dt * f2, Lam + 0.5 * dt * g2)
            x4, l4 = X + dt * f3, Lam + dt * g3
            f4, g4, u4_ = self._rhs(q, x4, l4)
            if record:
                l1 = self.cost.running_cost(q, X, u1_)
                lz2 = self.cost.running_cost(q, X + 0.5 * dt * f1, self.umin[q](X + 0.5 * dt * f1, Lam + 0.5 * dt * g1))
                lz3 = self.cost.running_cost(q, X + 0.5 * dt * f2, self.umin[q](X + 0.5 * dt * f2, Lam + 0.5 * dt * g2))
                l4_ = self.cost.running_cost(q, x4, u4_)
                rec["z"][k + 1] = rec["z"][k] + float(dt[0] / 6.0 * (l1 + 2 * lz2 + 2 * lz3 + l4_)[0])
            X = X + dt / 6.0 * (f1 + 2.0 * (f2 + f3) + f4)
            Lam = Lam + dt / 6.0 * (g1 + 2.0 * (g2 + g3) + g4)
            if record:
                rec["x"][:, k + 1], rec["lam"][:, k + 1] = X[:, 0], Lam[:, 0]
                rec["d0"][:, k], rec["d1"][:, k] = f1[:, 0], f4[:, 0]
                rec["u0"][:, k], rec["u1"][:, k] = u1_[:, 0], u4_[:, 0]
        return X, Lam, rec

    # -- residual ----------------------------------------------------------
    def switch_residual(self, j, xm, lm, xp, lp, p):
        """Residual blocks of switch ``j`` for single columns."""
        sys, cost = self.sys, self.cost
        ql, qr = self.qs[j], self.qs[j + 1]
        sigma = self.prob.events[j]
        kind = self.prob.kinds[j]
        _, xj = jump(sys, sigma, ql, xm)
        lam_target = adjoint_switch_condition(lp, xm, sigma, p, cost, sys, ql, kind)
        ul = self.umin[ql](xm[:, None], lm[:, None])[:, 0]
        ur = self.umin[qr](xp[:, None], lp[:, None])[:, 0]
        gap = hamiltonian(ql, xm, lm, ul, cost, sys) - hamiltonian(qr, xp, lp, ur, cost, sys)
        blocks = [xp - xj, lm - lam_target, [gap]]
        if kind == AUTONOMOUS:
            blocks.append([float(sys.manifolds[(ql, qr)](xm))])
        return np.concatenate([np.ravel(b) for b in blocks])

    def residual(self, Z):
        B = Z.shape[1]
        T = self.times(Z)
        out = []
        bad = np.zeros(B, dtype=bool)
        for i in range(self.L + 1):
            width = T[i + 1] - T[i]
            bad |= ~(width > 0)
            dt = np.where(width > 0, width, 1e-12) / self.M / self.N[i]
            for j in range(self.M):
                X, Lam = self.node(Z, i, j)
                Xe, Le, _ = self.integrate(self.qs[i], X, Lam, dt, self.N[i])
                if j < self.M - 1:
                    Xn, Ln = self.node(Z, i, j + 1)
                    out.append(np.concatenate([Xe - Xn, Le - Ln], axis=0))
                elif i < self.L:
                    Xp, Lp = self.node(Z, i + 1, 0)
                    P = self.p_of(Z, i)
                    cols = [self.switch_residual(i, Xe[:, b], Le[:, b], Xp[:, b], Lp[:, b], P[b]) for b in range(B)]
                    out.append(np.stack(cols, axis=1))
                else:
                    grads = np.stack([self.cost.terminal_gradient(Xe[:, b]) for b in range(B)], axis=1)
                    out.append(Le - grads)
        R = np.concatenate(out, axis=0)
        R[:, bad] = np.inf
        return R

    # -- initial guess -----------------------------------------------------
    def initial_guess(self, switch_times, p_values):
        """Node values from damped forward/backward sweeps on the forced schedule."""
        prob, sys, cost = self.prob, self.sys, self.cost
        forced = replace(sys, manifolds={})
        sched = tuple(zip(switch_times, prob.events))
        icfg = IntegratorConfig(step=self.cfg.step, max_switches=max(64, self.L + 1))
        u_tab = None
        traj = lams = None
        for sweep in range(max(1, self.cfg.sweeps)):
            if u_tab is None:
                ctrl = lambda t, q, x: self.umin[q](x, np.zeros_like(x))
            else:
                ctrl = _tabulated(u_tab)
            hin = HybridInput(ctrl, sched)
            traj = simulate(forced, hin, prob.q0, prob.x0, prob.span, icfg)
            lams = self.backward(traj, p_values)
            new_tab = []
            for k, (seg, lam) in enumerate(zip(traj.segments, lams)):
                uo = self.umin[seg.q](seg.x, lam)
                if u_tab is not None:
                    prev = np.array(ctrl(seg.t, seg.q, seg.x))
                    uo = (1.0 - self.cfg.damping) * prev + self.cfg.damping * uo
                new_tab.append((seg.t, uo))
            u_tab = new_tab
        z = np.zeros(self.size)
        for i, (seg, lam) in enumerate(zip(traj.segments, lams)):
            for j in range(self.M):
                xs, ls = self.slots[(i, j)]
                tj = seg.t_start + j * (seg.t_end - seg.t_start) / self.M
                xval = seg(tj) if j else seg.x[:, 0]
                lval = np.array([np.interp(tj, seg.t, row) for row in lam])
                if xs is not None:
                    z[xs] = xval
                z[ls] = lval
        z[self.t_slice] = switch_times
        z[self.p_slice] = [p_values[j] for j in self.aut]
        return z

    def backward(self, traj, p_values):
        lam_end = self.cost.terminal_gradient(traj.final_state)
        lams = [None] * len(traj.segments)
        for i in range(len(traj.segments) - 1, -1, -1):
            seg = traj.segments[i]
            lams[i] = adjoint_backward(self.sys, self.cost, seg, lam_end, self.umin[seg.q])
            if i > 0:
                sw = traj.switches[i - 1]
                lam_end = adjoint_switch_condition(lams[i][:, 0], sw.x_minus, sw.sigma, p_values.get(i - 1, 0.0),
                                                   self.cost, self.sys, sw.q_from, self.prob.kinds[i - 1])
        return lams


def _tabulated(tab):
    starts = np.array([t[0] for t, _ in tab])

    def control(t, q, x):
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(t)
        idx = np.clip(np.searchsorted(starts, tt, side="right") - 1, 0, len(tab) - 1)
        m = tab[0][1].shape[0]
        out = np.empty((m, len(tt)))
        for i in np.unique(idx):
            sel = idx == i
            ts, us = tab[i]
            for r in range(m):
                out[r, sel] = np.interp(tt[sel], ts, us[r])
        if scalar:
            return as_batch(out[:, 0], (m,), np.shape(x)[1:]).copy()
        return out

    return control


def solve(problem: HybridProblem, guess: Optional[dict] = None, cfg: HmpConfig = HmpConfig()) -> HmpExtremal:
    """Solve the necessary conditions for the fixed location sequence of ``problem``.

    Args:
        guess: optional ``{"times": [...], "p": [...]}``; defaults to the
            problem's ``switch_guess`` / ``p_guess``.  One time per switch
            and one ``p`` per autonomous switch.

    Raises:
        NewtonError: no convergence (carries the best residual).
        SingularJacobianError: degenerate shooting Jacobian.
    """
    sh = _Shooter(problem, cfg)
    guess = guess or {}
    times = list(guess.get("times", problem.switch_guess))
    if len(times) != sh.L:
        raise ValueError(f"need {sh.L} switching-time guesses, got {len(times)}")
    pg = list(guess.get("p", problem.p_guess or [0.0] * len(sh.aut)))
    if len(pg) != len(sh.aut):
        raise ValueError(f"need {len(sh.aut)} p guesses, got {len(pg)}")
    p_values = {j: float(v) for j, v in zip(sh.aut, pg)}

    z0 = sh.initial_guess(times, p_values)
    sh.set_steps(z0)
    res = newton(sh.residual, z0, tol=cfg.tol, max_iter=cfg.max_iter, fd_step=cfg.fd_step)
    iters = res.iterations
    used = list(sh.N)
    sh.set_steps(res.z)
    if any(abs(a - b) > 0.25 * b for a, b in zip(used, sh.N)):
        # switching times moved far: re-polish with matching step counts
        res = newton(sh.residual, res.z, tol=cfg.tol, max_iter=cfg.max_iter, fd_step=cfg.fd_step)
        iters += res.iterations
    else:
        sh.N = used
    return _build_extremal(sh, res.z, res.residual_norm, iters)


def candidate(problem: HybridProblem, switch_times, p_values=(), cfg: HmpConfig = HmpConfig()) -> HmpExtremal:
    """State/adjoint pair at fixed switching times, without the Newton solve.

    Runs only the damped forward/backward sweeps, so the Hamiltonian gaps
    of the result measure how far the given schedule is from extremal.
    """
    sh = _Shooter(problem, cfg)
    if len(switch_times) != sh.L:
        raise ValueError(f"need {sh.L} switching times, got {len(switch_times)}")
    pv = {j: float(v) for j, v in zip(sh.aut, list(p_values) or [0.0] * len(sh.aut))}
    z = sh.initial_guess(list(switch_times), pv)
    sh.set_steps(z)
    return _build_extremal(sh, z, float(np.max(np.abs(sh.residual(z[:, None])))), 0)


def _build_extremal(sh: _Shooter, z, residual_norm, iterations) -> HmpExtremal:
    prob = sh.prob
    Z = z[:, None]
    T = sh.times(Z)
    segments, switches = [], []
    J = 0.0
    for i in range(sh.L + 1):
        q = sh.qs[i]
        # integrate the segment continuously from its first node
        X, Lam = sh.node(Z, i, 0)
        if i > 0:
            X = switches[-1].x_plus[:, None]
        width = T[i + 1][0] - T[i][0]
        N = sh.N[i] * sh.M
        _, _, rec = sh.integrate(q, X, Lam, np.array([width / N]), N, record=True)
        t = T[i][0] + width * np.arange(N + 1) / N
        t[-1] = T[i + 1][0]
        segments.append(Segment(q, t, rec["x"], rec["d0"], rec["d1"], rec["u0"], rec["u1"]))
        J += rec["z"][-1]
        if i < sh.L:
            sigma = prob.events[i]
            xm = rec["x"][:, -1].copy()
            qn, xp = jump(prob.sys, sigma, q, xm)
            switches.append(SwitchRecord(float(t[-1]), prob.kinds[i], sigma, q, qn, xm, xp))
            J += prob.cost.switch_cost(sigma, xm)
    traj = HybridTrajectory(segments, switches)
    J += prob.cost.terminal_cost(traj.final_state)
    p_values = {j: float(sh.p_of(Z, j)[0]) for j in sh.aut}
    lams = sh.backward(traj, p_values)
    controls, mids = [], []
    for seg, lam in zip(segments, lams):
        controls.append(sh.umin[seg.q](seg.x, lam))
        tm, xm = seg.midpoints()
        lm = 0.5 * (lam[:, :-1] + lam[:, 1:])
        mids.append(sh.umin[seg.q](xm, lm) if len(seg.t) > 1 else np.zeros((controls[-1].shape[0], 0)))
    return HmpExtremal(
        trajectory=traj, adjoint_segments=lams, p_values=p_values, controls=controls,
        switching_times=tuple(sw.t for sw in switches), residual_norm=float(residual_norm), cost=float(J),
        iterations=iterations, problem=prob, midpoint_controls=mids,
    )


def mayer_minimizers(minimizers: dict) -> dict:
    """Closed-form minimisers for the accumulator-augmented problem.

    With ``lam_hat = (lam_z, lam)`` and ``lam_z > 0`` the augmented
    Hamiltonian is ``lam_z`` times the original one at ``lam / lam_z``.
    A zero ``lam_z`` (the all-zero start of the guess sweeps) is read as 1.
    """

    def wrap(fn):
        def umin(xh, lh):
            lz = np.where(lh[0] == 0.0, 1.0, lh[0])
            return fn(xh[1:], lh[1:] / lz)
        return umin

    return {q: wrap(fn) for q, fn in minimizers.items()}
