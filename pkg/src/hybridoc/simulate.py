"""Fixed-step RK4 execution of hybrid inputs with manifold crossing detection.

Several initial states can be marched in lockstep (:func:`simulate_many`);
members sharing a location are stepped as one batch, which is what makes
finite-difference oracles over many nearby initial states affordable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    AUTONOMOUS,
    CONTROLLED,
    ControlBoundsError,
    CostSpec,
    DimensionError,
    HybridError,
    HybridInput,
    HybridSystem,
    HybridTrajectory,
    Manifold,
    Segment,
    SwitchRecord,
    jump,
)


class BlowUpError(HybridError):
    def __init__(self, t: float, what: str = "state"):
        super().__init__(f"non-finite {what} encountered at t = {t:.12g}")
        self.t = t


class ManifoldTerminationError(HybridError):
    pass


class SwitchBudgetError(HybridError):
    pass


class AmbiguousSwitchError(HybridError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 1e-3
    crossing_tol: float = 1e-10
    max_switches: int = 64
    transversality_floor: float = 1e-8

    def __post_init__(self):
        for name in ("step", "crossing_tol", "max_switches", "transversality_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def rk4_step(f, ctrl, t, x, t_next):
    """One classical RK4 step ``t -> t_next`` of ``x' = f(x, ctrl(t, x))``.

    The last stage evaluates the control just left of ``t_next`` so that a
    right-continuous step control switching at ``t_next`` does not leak into
    the step.  Returns the new state, first and last stage slopes, and the
    controls used at the two ends.
    """
    h = t_next - t
    hh = 0.5 * h
    u0 = ctrl(t, x)
    k1 = f(x, u0)
    tm = t + hh
    xs = x + hh * k1
    k2 = f(xs, ctrl(tm, xs))
    xs = x + hh * k2
    k3 = f(xs, ctrl(tm, xs))
    xs = x + h * k3
    u1 = ctrl(np.nextafter(t_next, t), xs)
    k4 = f(xs, u1)
    xn = x + (h / 6.0) * (k1 + k4 + 2.0 * (k2 + k3))
    return xn, k1, k4, u0, u1


def knot_times(t0: float, tf: float, h: float, extra: Sequence[float] = ()) -> np.ndarray:
    """Grid ``t0 + k h`` up to ``tf`` with the ``extra`` instants inserted."""
    span = tf - t0
    nfull = int(np.floor(span / h + 1e-9))
    grid = t0 + h * np.arange(nfull + 1)
    tol = 1e-12 * max(1.0, abs(tf))
    if tf - grid[-1] > tol:
        grid = np.append(grid, tf)
    else:
        grid[-1] = tf
    extra = np.array(sorted(e for e in extra if t0 + tol < e < tf - tol), dtype=float)
    if len(extra):
        keep = np.ones(len(grid), dtype=bool)
        idx = np.searchsorted(grid, extra)
        for e, i in zip(extra, idx):
            for j in (i - 1, i):
                if 0 < j < len(grid) - 1 and abs(grid[j] - e) <= tol:
                    keep[j] = False
        grid = np.sort(np.concatenate([grid[keep], extra]))
    return grid


def _col(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _eval_manifold(man, X):
    """Manifold values for the columns of ``X`` (tries a vectorised call)."""
    try:
        v = np.asarray(man(X), dtype=float)
        if v.shape == (X.shape[1],):
            return v
        if v.size == 1 and X.shape[1] == 1:
            return v.reshape(1)
    except Exception:
        pass
    return np.array([float(man(X[:, b])) for b in range(X.shape[1])])


def _bisect(f, ctrl, man, t_lo, x_lo, t_hi, m_lo, cfg):
    lo, hi = t_lo, t_hi
    t_star, x_star = t_hi, None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        xm = rk4_step(f, ctrl, t_lo, x_lo, mid)[0]
        mv = float(np.ravel(man(xm[:, 0]))[0])
        t_star, x_star = mid, xm
        if abs(mv) <= cfg.crossing_tol:
            break
        if np.sign(mv) == np.sign(m_lo):
            lo = mid
        else:
            hi = mid
    return t_star, x_star


def _transversality(f, ctrl, man, t_lo, t_star, x_star):
    u = ctrl(np.nextafter(t_star, t_lo), x_star)
    fx = np.asarray(f(x_star, u), dtype=float)[:, 0]
    return float(man.gradient(x_star[:, 0]) @ fx)


def locate_crossing(field, control, manifold, bracket, cfg: IntegratorConfig = IntegratorConfig(),
                    require_transversal: bool = True):
    """Bisect the integration time inside one step until ``|m| <= crossing_tol``.

    Args:
        field: ``f(x, u)``.
        control: ``u(t, x)``.
        manifold: :class:`Manifold` (or a plain callable, then the gradient
            comes from finite differences).
        bracket: ``(t_lo, x_lo, t_hi, x_hi)`` with a sign change of ``m``.

    Returns:
        ``(t_star, x_star, transversal)``.
    """
    man = manifold if isinstance(manifold, Manifold) else Manifold(manifold)
    t_lo, x_lo, t_hi, x_hi = bracket
    x_lo = _col(x_lo)
    m_lo = float(man(x_lo[:, 0]))
    m_hi = float(man(_col(x_hi)[:, 0]))
    if not m_lo * m_hi < 0:
        raise ValueError("bracket does not contain a sign change of the manifold function")
    t_star, x_star = _bisect(field, control, man, t_lo, x_lo, t_hi, m_lo, cfg)
    slope = _transversality(field, control, man, t_lo, t_star, x_star)
    transversal = abs(slope) >= cfg.transversality_floor
    if require_transversal and not transversal:
        raise ManifoldTerminationError(
            f"non-transversal arrival on the switching manifold at t = {t_star:.12g} (|grad m . f| = {abs(slope):.3g})"
        )
    return t_star, x_star[:, 0].copy(), transversal


class _SegBuilder:
    def __init__(self, q, t, x):
        self.q = q
        self.t = [np.array([t])]
        self.x = [np.asarray(x, dtype=float).reshape(-1, 1)]
        self.d0, self.d1, self.u0, self.u1 = [], [], [], []

    def add(self, t, x, d0, d1, u0, u1):
        """Append steps whose end knots are ``t`` (K,) and ``x`` (n, K)."""
        self.t.append(np.atleast_1d(t))
        self.x.append(x)
        self.d0.append(d0)
        self.d1.append(d1)
        self.u0.append(u0)
        self.u1.append(u1)

    def build(self, box, n):
        t = np.concatenate(self.t)
        x = np.concatenate(self.x, axis=1)
        m = box.dim
        cat = (lambda parts, k: np.concatenate(parts, axis=1) if parts else np.zeros((k, 0)))
        u0, u1 = cat(self.u0, m), cat(self.u1, m)
        for u, tt in ((u0, t[:-1]), (u1, t[1:])):
            bad = (u < box.lower[:, None] - 1e-12) | (u > box.upper[:, None] + 1e-12)
            if np.any(bad):
                k = int(np.argmax(np.any(bad, axis=0)))
                raise ControlBoundsError(
                    f"control {u[:, k]} outside the box of location {self.q} at t = {tt[k]:.12g}"
                )
        return Segment(self.q, t, x, cat(self.d0, n), cat(self.d1, n), u0, u1)


class _Member:
    def __init__(self, q, x, t):
        self.q = q
        self.x = x  # (n, 1)
        self.segments = [_SegBuilder(q, t, x[:, 0])]
        self.switches = []


class _Group:
    """Members sharing a location, stepped together."""

    def __init__(self, sys, hinput, q, members):
        self.q = q
        self.members = members
        self.X = np.concatenate([m.x for m in members], axis=1)
        self.f = sys.vector_fields[q]
        control = hinput.control
        self.ctrl = lambda t, x: control(t, q, x)
        self.mans = sys.manifolds_from(q)
        self.mvals = [_eval_manifold(man, self.X) for _, man in self.mans]
        self.hist = ([], [], [], [], [], [])

    def flush(self):
        """Hand the accumulated steps over to the members' current segments."""
        T, X, D0, D1, U0, U1 = self.hist
        if T:
            T = np.array(T)
            X, D0, D1, U0, U1 = (np.stack(a, axis=-1) for a in (X, D0, D1, U0, U1))
            for i, mem in enumerate(self.members):
                mem.segments[-1].add(T, X[:, i], D0[:, i], D1[:, i], U0[:, i], U1[:, i])
        for i, mem in enumerate(self.members):
            mem.x = self.X[:, i:i + 1]
        self.hist = ([], [], [], [], [], [])


def _regroup(sys, hinput, members):
    groups = {}
    for mem in members:
        groups.setdefault(mem.q, []).append(mem)
    return [_Group(sys, hinput, q, ms) for q, ms in groups.items()]


def _single_steps(sys, hinput, mem, t, t_next, cfg, sched_at_end):
    """Advance one member from ``t`` to ``t_next`` handling any crossings."""
    while t_next - t > 0:
        q = mem.q
        grp = _Group(sys, hinput, q, [mem])
        x = mem.x
        xn, k1, k4, u0, u1 = rk4_step(grp.f, grp.ctrl, t, x, t_next)
        if not np.all(np.isfinite(xn)):
            raise BlowUpError(t_next)
        hit = None
        for (r, man), mprev in zip(grp.mans, grp.mvals):
            mnew = float(man(xn[:, 0]))
            if mprev[0] * mnew < 0:
                ts, xs = _bisect(grp.f, grp.ctrl, man, t, x, t_next, mprev[0], cfg)
                if hit is None or ts < hit[0]:
                    hit = (ts, xs, r, man)
        if hit is None:
            mem.segments[-1].add(t_next, xn, k1, k4, u0, u1)
            mem.x = xn
            return
        if sched_at_end:
            raise AmbiguousSwitchError(
                f"autonomous crossing and controlled switch within one step before t = {t_next:.12g}"
            )
        ts, xs, r, man = hit
        _apply_autonomous(sys, grp, mem, t, x, ts, xs, r, man, cfg)
        t = ts


def _apply_autonomous(sys, grp, mem, t, x, ts, xs, r, man, cfg):
    xs, k1, k4, u0, u1 = rk4_step(grp.f, grp.ctrl, t, x, ts)
    slope = _transversality(grp.f, grp.ctrl, man, t, ts, xs)
    if abs(slope) < cfg.transversality_floor:
        raise ManifoldTerminationError(
            f"non-transversal arrival on manifold ({mem.q}, {r}) at t = {ts:.12g}"
        )
    mem.segments[-1].add(ts, xs, k1, k4, u0, u1)
    sigma = sys.autonomous_event(mem.q, r)
    _do_jump(sys, mem, sigma, ts, xs[:, 0], AUTONOMOUS, cfg)


def _do_jump(sys, mem, sigma, t, x_minus, kind, cfg):
    q_to, x_plus = jump(sys, sigma, mem.q, x_minus)
    mem.switches.append(SwitchRecord(float(t), kind, sigma, mem.q, q_to, x_minus.copy(), x_plus.copy()))
    if len(mem.switches) > cfg.max_switches:
        raise SwitchBudgetError(f"switch budget of {cfg.max_switches} exhausted at t = {t:.12g}")
    mem.q = q_to
    mem.x = x_plus.reshape(-1, 1)
    mem.segments.append(_SegBuilder(q_to, t, x_plus))


def simulate_many(sys: HybridSystem, hinput: HybridInput, q0: str, x0s, span, cfg: IntegratorConfig = IntegratorConfig()):
    """Simulate the same hybrid input from several initial states.

    Returns one :class:`HybridTrajectory` per initial state; each equals what
    :func:`simulate` produces for that state alone.
    """
    t0, tf = float(span[0]), float(span[1])
    if not tf > t0:
        raise ValueError("span must satisfy t0 < tf")
    for ts, sigma in hinput.schedule:
        if not t0 <= ts < tf:
            raise ValueError(f"scheduled switch at {ts} outside [{t0}, {tf})")
    n0 = sys.state_dims.get(q0)
    if n0 is None:
        raise DimensionError(f"unknown discrete state {q0!r}")
    members = []
    for x0 in x0s:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (n0,):
            raise DimensionError(f"initial state has shape {x0.shape}, location {q0} needs ({n0},)")
        members.append(_Member(q0, x0.reshape(-1, 1).copy(), t0))

    sched = dict(hinput.schedule)
    knots = knot_times(t0, tf, cfg.step, list(sched) + list(hinput.breakpoints))
    sched_idx = {}
    for ts, sigma in hinput.schedule:
        k = int(np.argmin(np.abs(knots - ts)))
        sched_idx[k] = sigma

    if 0 in sched_idx:
        for mem in members:
            _do_jump(sys, mem, sched_idx[0], t0, mem.x[:, 0], CONTROLLED, cfg)
    groups = _regroup(sys, hinput, members)

    for k in range(len(knots) - 1):
        t, tn = knots[k], knots[k + 1]
        switch_next = (k + 1) in sched_idx
        changed = False
        for grp in groups:
            xn, k1, k4, u0, u1 = rk4_step(grp.f, grp.ctrl, t, grp.X, tn)
            if not math.isfinite(xn.sum()):
                raise BlowUpError(tn)
            crossed = np.zeros(xn.shape[1], dtype=bool)
            newm = []
            for (r, man), mprev in zip(grp.mans, grp.mvals):
                mnew = _eval_manifold(man, xn)
                crossed |= mprev * mnew < 0
                newm.append(mnew)
            if not crossed.any():
                for lst, val in zip(grp.hist, (tn, xn, k1, k4, u0, u1)):
                    lst.append(val)
                grp.X = xn
                grp.mvals = newm
                continue
            if switch_next:
                raise AmbiguousSwitchError(
                    f"autonomous crossing and controlled switch within one step before t = {tn:.12g}"
                )
            changed = True
            grp.flush()
            for i, mem in enumerate(grp.members):
                if not crossed[i]:
                    sl = slice(i, i + 1)
                    mem.segments[-1].add(tn, xn[:, sl], k1[:, sl], k4[:, sl], u0[:, sl], u1[:, sl])
                    mem.x = xn[:, sl]
                    continue
                x = mem.x
                hit = None
                for (r, man), mprev, mnew in zip(grp.mans, grp.mvals, newm):
                    if mprev[i] * mnew[i] < 0:
                        ts, xs = _bisect(grp.f, grp.ctrl, man, t, x, tn, mprev[i], cfg)
                        if hit is None or ts < hit[0]:
                            hit = (ts, xs, r, man)
                ts, xs, r, man = hit
                _apply_autonomous(sys, grp, mem, t, x, ts, xs, r, man, cfg)
                _single_steps(sys, hinput, mem, ts, tn, cfg, False)
        if switch_next:
            for grp in groups:
                grp.flush()
            for mem in members:
                _do_jump(sys, mem, sched_idx[k + 1], tn, mem.x[:, 0], CONTROLLED, cfg)
            changed = True
        if changed:
            for grp in groups:
                if grp.hist[0]:
                    grp.flush()
            groups = _regroup(sys, hinput, members)
    for grp in groups:
        grp.flush()

    out = []
    for mem in members:
        segs = [sb.build(sys.control_sets[sb.q], sys.state_dims[sb.q]) for sb in mem.segments]
        out.append(HybridTrajectory(segs, list(mem.switches)))
    return out


def simulate(sys: HybridSystem, hinput: HybridInput, q0: str, x0, span, cfg: IntegratorConfig = IntegratorConfig()) -> HybridTrajectory:
    """Execute ``hinput`` from ``(q0, x0)`` over ``span``.

    Controlled switches are applied at their scheduled instants; autonomous
    switches fire when a manifold of the current location changes sign
    between two knots, located by bisection.  After a jump the integration
    restarts at the switching instant and then continues on the common grid.
    """
    return simulate_many(sys, hinput, q0, [x0], span, cfg)[0]


def integrate_segment(field: Callable, x0, control: Callable, span, cfg: IntegratorConfig = IntegratorConfig()) -> Segment:
    """RK4 path of ``x' = field(x, control(t, x))`` on ``span`` with Hermite dense output."""
    t_a, t_b = float(span[0]), float(span[1])
    if not t_b > t_a:
        raise ValueError("span must satisfy t_a < t_b")
    x = _col(x0)
    if not np.all(np.isfinite(x)):
        raise BlowUpError(t_a)
    f = lambda xx, u: np.asarray(field(xx, u), dtype=float)
    ctrl = lambda t, xx: np.asarray(control(t, xx), dtype=float)
    sb = _SegBuilder(None, t_a, x[:, 0])
    T, X, D0, D1, U0, U1 = [], [], [], [], [], []
    knots = knot_times(t_a, t_b, cfg.step)
    for t, tn in zip(knots[:-1], knots[1:]):
        x, k1, k4, u0, u1 = rk4_step(f, ctrl, t, x, tn)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(tn)
        for lst, val in zip((T, X, D0, D1, U0, U1), (tn, x, k1, k4, u0, u1)):
            lst.append(val)
    cat = lambda a: np.concatenate(a, axis=1)
    sb.add(np.array(T), cat(X), cat(D0), cat(D1), cat(U0), cat(U1))
    t = np.concatenate(sb.t)
    return Segment(None, t, np.concatenate(sb.x, axis=1), sb.d0[0], sb.d1[0], sb.u0[0], sb.u1[0])


def _batched_control(hinput, q, t, x):
    try:
        u = np.asarray(hinput.control(t, q, x), dtype=float)
        if u.ndim == 2 and u.shape[1] == x.shape[1]:
            return u
    except Exception:
        pass
    return np.concatenate([_col(hinput.control(float(t[k]), q, x[:, k:k + 1])) for k in range(x.shape[1])], axis=1)


def running_integral(seg: Segment, cost: CostSpec, hinput: HybridInput) -> float:
    """Composite Simpson of ``l_q`` over one segment using Hermite midpoints."""
    if len(seg.t) < 2 or seg.q not in cost.running:
        return 0.0
    h = np.diff(seg.t)
    tm, xm = seg.midpoints()
    um = _batched_control(hinput, seg.q, tm, xm)
    l0 = cost.running_cost(seg.q, seg.x[:, :-1], seg.u0)
    l1 = cost.running_cost(seg.q, seg.x[:, 1:], seg.u1)
    lm = cost.running_cost(seg.q, xm, um)
    return float(np.sum(h * (l0 + 4.0 * lm + l1)) / 6.0)


def evaluate_cost(traj: HybridTrajectory, cost: CostSpec, hinput: HybridInput) -> float:
    """Hybrid cost: running integrals, switching costs at ``x(t_j-)``, terminal cost."""
    J = sum(running_integral(seg, cost, hinput) for seg in traj.segments)
    J += sum(cost.switch_cost(sw.sigma, sw.x_minus) for sw in traj.switches)
    return J + cost.terminal_cost(traj.final_state)
