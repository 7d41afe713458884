"""Dynamic programming on grids: value functions, value gradients and cost
sensitivities of hybrid systems.

The value function is tabulated per stage (location plus remaining switch
count) on a uniform tensor grid and computed backward in time by a
semi-Lagrangian scheme.  :func:`propagate_sensitivity` integrates the
gradient of the cost-to-go of an arbitrary feedback along its trajectory.
"""
from __future__ import annotations

import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix

from .core import (
    AUTONOMOUS,
    CONTROLLED,
    CostSpec,
    HybridError,
    HybridInput,
    HybridSystem,
    HybridTrajectory,
    fd_step,
    numerical_jacobian,
)
from .hmp import golden_section
from .simulate import IntegratorConfig, simulate

log = logging.getLogger(__name__)

BIG = 1e10  # value of states from which the remaining switches cannot be completed


class GridError(HybridError, ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over ``[lower, upper]`` with spacing about ``dx`` and time step ``dt``.

    The number of cells per axis is ``round((upper - lower) / dx)``, so the
    realised spacing can differ slightly from ``dx``.
    """

    lower: tuple
    upper: tuple
    dx: float
    dt: float
    levels: int = 41
    refine: bool = True

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("grid box needs lower < upper on every axis")
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be positive")
        if self.levels < 2:
            raise ValueError("need at least two control levels")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def axes(self) -> list:
        return [np.linspace(a, b, max(2, int(round((b - a) / self.dx))) + 1) for a, b in zip(self.lower, self.upper)]

    def time_nodes(self, t0: float, tf: float) -> np.ndarray:
        return np.linspace(t0, tf, max(1, int(round((tf - t0) / self.dt))) + 1)


class _UniformGrid:
    """Multilinear interpolation on a uniform tensor grid (C-ordered nodes)."""

    def __init__(self, axes):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.d = len(axes)
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])
        self.n = np.array([len(a) for a in self.axes])
        self.h = (self.hi - self.lo) / (self.n - 1)
        self.shape = tuple(int(v) for v in self.n)
        self.size = int(np.prod(self.n))
        strides = np.ones(self.d, dtype=np.int64)
        for i in range(self.d - 2, -1, -1):
            strides[i] = strides[i + 1] * self.n[i + 1]
        self.strides = strides
        self.corners = list(itertools.product((0, 1), repeat=self.d))
        self.offsets = np.array([sum(b * st for b, st in zip(bits, strides)) for bits in self.corners], dtype=np.int64)

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh])

    def plan(self, Y):
        """Corner indices and weights for points ``Y`` of shape ``(d, *batch)``.

        Points outside the box are clamped onto it; the number of such
        points is returned as well.
        """
        Y = np.asarray(Y, dtype=float)
        batch = Y.shape[1:]
        base = np.zeros(batch, dtype=np.int64)
        W = np.ones((1,) + batch)
        outside = np.zeros(batch, dtype=bool)
        for i in range(self.d):
            s = (Y[i] - self.lo[i]) / self.h[i]
            outside |= (s < -1e-9) | (s > self.n[i] - 1 + 1e-9)
            s = np.clip(s, 0.0, self.n[i] - 1)
            c = np.minimum(s.astype(np.int64), self.n[i] - 2)
            f = s - c
            base += c * self.strides[i]
            W = np.stack((W * (1.0 - f), W * f), axis=1).reshape((-1,) + batch)
        idx = base[None] + self.offsets.reshape((-1,) + (1,) * len(batch))
        return idx, W, int(np.count_nonzero(outside))

    @staticmethod
    def apply(values_flat, plan):
        idx, w = plan[0], plan[1]
        return np.sum(values_flat[idx] * w, axis=0)

    def __call__(self, values_flat, Y):
        return self.apply(values_flat, self.plan(Y))


@dataclass
class ValueGrid:
    """Tabulated value of one stage.

    ``values`` has shape ``(Nt+1, *grid shape)``; ``controls`` holds the
    minimising control per node, ``(Nt+1, m, *grid shape)``; ``switched``
    marks nodes where switching now was the better (or forced) option.
    """

    q: str
    remaining: int
    t_nodes: np.ndarray
    x_nodes: list
    values: np.ndarray
    control_table: np.ndarray
    switched: np.ndarray
    kind: Optional[str] = None
    stage: int = 0
    contamination: int = 0

    def __post_init__(self):
        self._grid = _UniformGrid(self.x_nodes)

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def dx(self) -> np.ndarray:
        return self._grid.h.copy()

    @property
    def dim(self) -> int:
        return self._grid.d

    def slice_index(self, t: float) -> int:
        k = int(round((t - self.t_nodes[0]) / self.dt))
        return min(max(k, 0), len(self.t_nodes) - 1)

    def interpolate(self, t: float, x) -> float:
        """Multilinear interpolation of ``V`` at the time slice nearest to ``t``."""
        k = self.slice_index(t)
        x = np.asarray(x, dtype=float).reshape(self.dim, -1)
        out = self._grid(self.values[k].ravel(), x)
        return float(out[0]) if out.size == 1 else out

    def inside(self, x, margin=0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self._grid.lo + margin - 1e-12) and np.all(x <= self._grid.hi - margin + 1e-12))


def _vec(fn, X, out_rows=None):
    """Apply a single-state function to the columns of ``X``, batched when it allows."""
    N = X.shape[1]
    try:
        out = np.asarray(fn(X), dtype=float)
        if out_rows is None and out.shape == (N,):
            return out
        if out_rows is not None and out.shape == (out_rows, N):
            return out
    except Exception:
        pass
    cols = [np.asarray(fn(X[:, k]), dtype=float) for k in range(N)]
    return np.array(cols) if out_rows is None else np.stack([np.atleast_1d(c) for c in cols], axis=1)


def _control_levels(box, levels):
    axes = [np.linspace(lo, hi, levels) for lo, hi in zip(box.lower, box.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh]), axes


class _Stage:
    """One stage of the backward recursion with its precomputed plans."""

    def __init__(self, j, q, remaining, sys, cost, spec: GridSpec, sigma, kind, nxt):
        self.j, self.q, self.remaining = j, q, remaining
        self.sys, self.cost, self.spec = sys, cost, spec
        self.sigma, self.kind, self.next = sigma, kind, nxt
        self.grid = _UniformGrid(spec.axes())
        if self.grid.d != sys.state_dims[q]:
            raise GridError(f"grid for {q} has dimension {self.grid.d}, state has {sys.state_dims[q]}")
        self.X = self.grid.nodes()
        self.N = self.grid.size
        self.box = sys.control_sets[q]
        self.U, self.u_axes = _control_levels(self.box, spec.levels)
        self.du = np.array([a[1] - a[0] for a in self.u_axes])
        self.contamination = 0
        self.manifold = None
        if kind == AUTONOMOUS:
            self.manifold = sys.manifolds[(q, nxt.q)]
            self.mX = _vec(self.manifold, self.X)
        if nxt is not None:
            self.cX = self._switch_cost(self.X)
            self.switch_plan = self._switch_plan(self.X)

    def _switch_plan(self, P):
        """Plan for ``V_next(xi(P))`` at points ``P`` of shape ``(n, *batch)``."""
        shp = P.shape[1:]
        flat = P.reshape(P.shape[0], -1)
        jm = self.sys.jump_map(self.sigma)
        Y = _vec(jm, flat, self.next.grid.d)
        idx, w, out = self.next.grid.plan(Y)
        self.contamination += out
        return idx.reshape((-1,) + shp), w.reshape((-1,) + shp)

    def _switch_cost(self, P):
        flat = P.reshape(P.shape[0], -1)
        c = self.cost.switching.get(self.sigma)
        if c is None:
            return np.zeros(P.shape[1:])
        return _vec(c.fn, flat).reshape(P.shape[1:])

    def plan(self, X, U):
        """Everything needed to evaluate the one-step objective at nodes ``X``
        (``(n, N)``) for controls ``U`` (``(m, N, L)``)."""
        n = X.shape[0]
        Xb = np.broadcast_to(X[:, :, None], (n,) + U.shape[1:])
        f = self.sys.field(self.q, Xb, U)
        dt = self.spec.dt
        l = np.asarray(self.cost.running_cost(self.q, Xb, U), dtype=float)
        Y = Xb + dt * f
        idx, w, out = self.grid.plan(Y)
        self.contamination += out
        pl = {"own": (idx, w), "l": l * dt}
        if self.kind == AUTONOMOUS:
            mY = _vec(self.manifold, Y.reshape(n, -1)).reshape(U.shape[1:])
            mX = np.broadcast_to(_vec(self.manifold, X)[:, None], mY.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                cross = (mX == 0.0) | (mX * mY < 0.0)
                theta = np.where(cross, mX / np.where(mX - mY == 0.0, 1.0, mX - mY), 0.0)
            theta = np.clip(theta, 0.0, 1.0)
            if np.any(cross):
                Xc = Xb + theta[None] * (Y - Xb)
                sidx, sw = self._switch_plan(Xc)
                pl["cross"] = (cross, theta, sidx, sw, theta * l * dt + self._switch_cost(Xc))
        return pl

    def operator(self, pl):
        """Sparse form of a plan: ``value = base + S V_own + Sk Vn_k + Sk1 Vn_k1``."""
        idx, w = pl["own"]
        shp = idx.shape[1:]
        rows = np.broadcast_to(np.arange(int(np.prod(shp))).reshape(shp)[None], idx.shape).ravel()
        base = pl["l"].ravel().copy()
        keep = np.ones(shp)
        ops = []
        if "cross" in pl:
            cross, theta, sidx, sw, cbase = pl["cross"]
            keep = (~cross).astype(float)
            base = np.where(cross, cbase, pl["l"]).ravel()
            for fac in (1.0 - theta, theta):
                ops.append(csr_matrix(((sw * (fac * cross)[None]).ravel(), (rows, sidx.ravel())),
                                      shape=(rows.max() + 1, self.next.N)))
        own = csr_matrix(((w * keep[None]).ravel(), (rows, idx.ravel())), shape=(rows.max() + 1, self.N))
        own.eliminate_zeros()
        for op in ops:
            op.eliminate_zeros()
        return base, own, ops, shp

    def evaluate_operator(self, op, V_own_next, Vn_k, Vn_k1):
        base, own, ops, shp = op
        val = base + own @ V_own_next
        if ops:
            val += ops[0] @ Vn_k + ops[1] @ Vn_k1
        return np.minimum(val, BIG).reshape(shp)

    def evaluate(self, pl, V_own_next, Vn_k, Vn_k1):
        val = pl["l"] + self.grid.apply(V_own_next, pl["own"])
        if "cross" in pl:
            cross, theta, sidx, sw, base = pl["cross"]
            sv = (1.0 - theta) * np.sum(Vn_k[sidx] * sw, axis=0) + theta * np.sum(Vn_k1[sidx] * sw, axis=0)
            val = np.where(cross, base + sv, val)
        return np.minimum(val, BIG)


def _infer_events(sys, q_sequence, events):
    if events is not None:
        return tuple(events)
    out = []
    for a, b in zip(q_sequence, q_sequence[1:]):
        cands = [s for (p, s), r in sys.automaton.items() if p == a and r == b]
        if len(cands) != 1:
            raise HybridError(f"cannot infer a unique event for {a} -> {b}")
        out.append(cands[0])
    return tuple(out)


def solve_hjb(sys: HybridSystem, cost: CostSpec, q_sequence: Sequence[str], grid, span, events=None,
              kinds=None) -> list:
    """Backward semi-Lagrangian recursion over the stages of a location sequence.

    ``grid`` is one :class:`GridSpec` or one per stage (all with the same
    ``dt``).  Returns a list of :class:`ValueGrid`, index ``j`` holding the
    value of location ``q_sequence[j]`` with ``L - j`` switches to go.

    Controlled stages take, at every slice, the cheaper of continuing and
    switching now.  Autonomous stages switch where a characteristic
    crosses the surface inside a step; the crossing point and time are
    found by linear interpolation of the surface values at both ends.
    """
    q_sequence = tuple(q_sequence)
    L = len(q_sequence) - 1
    events = _infer_events(sys, q_sequence, events)
    if len(events) != L:
        raise HybridError("need one event per transition")
    if kinds is None:
        kinds = tuple(AUTONOMOUS if (a, b) in sys.manifolds else CONTROLLED for a, b in zip(q_sequence, q_sequence[1:]))
    specs = list(grid) if isinstance(grid, (list, tuple)) else [grid] * (L + 1)
    if len(specs) != L + 1:
        raise GridError("need one grid per stage")
    dts = {s.dt for s in specs}
    if len(dts) != 1:
        raise GridError("all stages must share the time step")
    t0, tf = float(span[0]), float(span[1])
    t_nodes = specs[0].time_nodes(t0, tf)
    Nt = len(t_nodes) - 1
    specs = [GridSpec(s.lower, s.upper, s.dx, (tf - t0) / Nt, s.levels, s.refine) for s in specs]

    stages = [None] * (L + 1)
    for j in range(L, -1, -1):
        nxt = stages[j + 1] if j < L else None
        stages[j] = _Stage(j, q_sequence[j], L - j, sys, cost, specs[j],
                           events[j] if j < L else None, kinds[j] if j < L else None, nxt)

    values = [np.empty((Nt + 1, st.N)) for st in stages]
    ctrls = [np.full((Nt + 1, st.U.shape[0], st.N), np.nan, dtype=np.float32) for st in stages]
    switched = [np.zeros((Nt + 1, st.N), dtype=bool) for st in stages]

    # terminal slices
    for j in range(L, -1, -1):
        st = stages[j]
        if j == L:
            values[j][Nt] = _vec(cost.terminal, st.X)
        else:
            sv = st.cX + _UniformGrid.apply(values[j + 1][Nt], st.switch_plan)
            if st.kind == AUTONOMOUS:
                on = np.abs(st.mX) <= 1e-12
                values[j][Nt] = np.where(on, sv, BIG)
                switched[j][Nt] = on
            else:
                values[j][Nt] = np.minimum(sv, BIG)
                switched[j][Nt] = True

    level_plans = []
    for st in stages:
        Ub = np.broadcast_to(st.U[:, None, :], (st.U.shape[0], st.N, st.U.shape[1]))
        level_plans.append(st.operator(st.plan(st.X, Ub)))

    for k in range(Nt - 1, -1, -1):
        for j in range(L, -1, -1):
            st = stages[j]
            Vn_k = values[j + 1][k] if j < L else None
            Vn_k1 = values[j + 1][k + 1] if j < L else None
            vals = st.evaluate_operator(level_plans[j], values[j][k + 1], Vn_k, Vn_k1)
            best = np.argmin(vals, axis=1)
            v = vals[np.arange(st.N), best]
            u = st.U[:, best]
            if st.spec.refine:
                u, v = _refine(st, u, v, values[j][k + 1], Vn_k, Vn_k1)
            sw = np.zeros(st.N, dtype=bool)
            if st.kind == CONTROLLED:
                s_now = st.cX + _UniformGrid.apply(Vn_k, st.switch_plan)
                sw = s_now < v
                v = np.where(sw, s_now, v)
            elif st.kind == AUTONOMOUS:
                sw = np.abs(st.mX) <= 1e-12
            values[j][k] = np.minimum(v, BIG)
            ctrls[j][k] = u
            switched[j][k] = sw

    out = []
    for j, st in enumerate(stages):
        if st.contamination:
            log.info("stage %d: %d characteristic feet clamped onto the grid box", j, st.contamination)
        out.append(ValueGrid(st.q, st.remaining, t_nodes, st.grid.axes, values[j].reshape((Nt + 1,) + st.grid.shape),
                             ctrls[j].reshape((Nt + 1, st.U.shape[0]) + st.grid.shape),
                             switched[j].reshape((Nt + 1,) + st.grid.shape), st.kind, j, st.contamination))
    return out


_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def _refine(st: _Stage, u, v, V_own_next, Vn_k, Vn_k1, rel_tol=1e-2):
    """Golden-section polish of each control coordinate around the discrete argmin.

    The bracket is one control level on each side; the two interior
    probes of the last iteration are the only candidates, the bracket
    ends being discrete levels already compared.
    """
    u = u.copy()
    v = v.copy()
    sel = np.nonzero(v < BIG / 2)[0]
    if len(sel) == 0:
        return u, v
    X = st.X[:, sel]
    lo_box, hi_box = np.asarray(st.box.lower), np.asarray(st.box.upper)
    iters = int(np.ceil(np.log(rel_tol) / np.log(_INV_PHI)))
    us, vs = u[:, sel], v[sel]
    for i in range(u.shape[0]):
        a = np.maximum(us[i] - st.du[i], lo_box[i])
        b = np.minimum(us[i] + st.du[i], hi_box[i])

        def obj(c, i=i):
            U = us[:, :, None].copy()
            U[i, :, 0] = c
            return st.evaluate(st.plan(X, U), V_own_next, Vn_k, Vn_k1)[:, 0]

        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        fc, fd = obj(c), obj(d)
        for _ in range(iters):
            left = fc < fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            new = np.where(left, b - _INV_PHI * (b - a), a + _INV_PHI * (b - a))
            fn = obj(new)
            c, d = np.where(left, new, d), np.where(left, c, new)
            fc, fd = np.where(left, fn, fd), np.where(left, fc, fn)
        cand = np.where(fc <= fd, c, d)
        vc = np.minimum(fc, fd)
        better = vc < vs
        us[i] = np.where(better, cand, us[i])
        vs = np.where(better, vc, vs)
    u[:, sel], v[sel] = us, vs
    return u, v


def value_gradient(grid: ValueGrid, t: float, x) -> np.ndarray:
    """Central differences of the interpolated value, step ``dx`` per axis, at the nearest slice."""
    x = np.asarray(x, dtype=float).ravel()
    h = grid.dx
    if not grid.inside(x, margin=h):
        raise GridError(f"point {x} is not interior to the grid")
    k = grid.slice_index(t)
    Vk = grid.values[k].ravel()
    pts = np.repeat(x[:, None], 2 * grid.dim, axis=1)
    for i in range(grid.dim):
        pts[i, 2 * i] += h[i]
        pts[i, 2 * i + 1] -= h[i]
    vals = grid._grid(Vk, pts)
    return (vals[0::2] - vals[1::2]) / (2 * h)


def hjb_residual(sys: HybridSystem, cost: CostSpec, grid: ValueGrid, t: float, x, levels: int = 41) -> float:
    """``dV/dt + min_u { l_q + grad V . f_q }`` at an interior point.

    The time derivative is a forward difference between the nearest slice
    and the next one.
    """
    x = np.asarray(x, dtype=float).ravel()
    k = min(grid.slice_index(t), len(grid.t_nodes) - 2)
    tk = grid.t_nodes[k]
    Vt = (grid.interpolate(grid.t_nodes[k + 1], x) - grid.interpolate(tk, x)) / grid.dt
    g = value_gradient(grid, tk, x)
    box = sys.control_sets[grid.q]
    U, axes = _control_levels(box, levels)

    def ham(Uc):
        Xb = np.broadcast_to(x[:, None], (len(x), Uc.shape[1]))
        return cost.running_cost(grid.q, Xb, Uc) + g @ sys.field(grid.q, Xb, Uc)

    vals = ham(U)
    b = int(np.argmin(vals))
    u = U[:, b].copy()
    best = vals[b]
    for i in range(len(u)):
        du = axes[i][1] - axes[i][0]

        def obj(c, i=i):
            Uc = np.repeat(u[:, None], np.size(c), axis=1)
            Uc[i] = np.ravel(c)
            return ham(Uc).reshape(np.shape(c))

        c = golden_section(obj, np.array([max(u[i] - du, box.lower[i])]), np.array([min(u[i] + du, box.upper[i])]),
                           tol=1e-10)
        vc = float(obj(c)[0])
        if vc < best:
            best, u[i] = vc, float(c[0])
    return float(Vt + best)


def estimate_lipschitz(grid: ValueGrid, region=None, t_range=None) -> float:
    """Largest difference quotient of ``V`` between neighbouring nodes.

    Pairs are nodes adjacent along each axis (and diagonals in 2-D) within a
    slice, and the same or adjacent nodes on consecutive slices, with
    distance ``sqrt(|dx|^2 + dt^2)``.  Only nodes inside ``region``
    (``(lower, upper)``), slices inside ``t_range`` and values below the
    infeasibility level are used.
    """
    V = grid.values
    t = grid.t_nodes
    ks = np.arange(len(t))
    if t_range is not None:
        ks = ks[(t >= t_range[0] - 1e-12) & (t <= t_range[1] + 1e-12)]
    V = V[ks]
    mask = V < BIG / 2
    if region is not None:
        lo, hi = np.atleast_1d(region[0]), np.atleast_1d(region[1])
        mesh = np.meshgrid(*grid.x_nodes, indexing="ij")
        inside = np.ones(grid._grid.shape, dtype=bool)
        for i, m in enumerate(mesh):
            inside &= (m >= lo[i] - 1e-12) & (m <= hi[i] + 1e-12)
        mask &= inside[None]
    h = grid.dx
    dt = grid.dt
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=grid.dim) if any(o)]
    best = 0.0
    for dk in (0, 1):
        if dk == 1 and V.shape[0] < 2:
            continue
        for off in ([tuple([0] * grid.dim)] if dk else []) + offsets:
            if dk == 0 and off < tuple([0] * grid.dim):
                continue  # each unordered pair once
            a_sl = [slice(None, V.shape[0] - dk)]
            b_sl = [slice(dk, None)]
            for o in off:
                a_sl.append(slice(max(0, -o), None if o <= 0 else -o))
                b_sl.append(slice(max(0, o), None if o >= 0 else o))
            A, B = V[tuple(a_sl)], V[tuple(b_sl)]
            M = mask[tuple(a_sl)] & mask[tuple(b_sl)]
            if not M.any():
                continue
            dist = np.sqrt(sum((o * hi_) ** 2 for o, hi_ in zip(off, h)) + (dk * dt) ** 2)
            best = max(best, float(np.max(np.abs(A - B)[M])) / dist)
    return best


# --- cost sensitivity --------------------------------------------------------

@dataclass
class SensitivityTrajectory:
    """Gradient of the cost-to-go of a fixed feedback along its trajectory.

    ``gradients[i]`` is sampled on the knots of ``trajectory.segments[i]``;
    ``p_values`` maps switch index to ``p`` for autonomous switches.
    """

    trajectory: HybridTrajectory
    gradients: list
    p_values: dict = field(default_factory=dict)

    def __post_init__(self):
        for seg, g in zip(self.trajectory.segments, self.gradients):
            if g.shape != seg.x.shape:
                raise HybridError("gradient and state dimensions differ")

    @property
    def initial(self) -> np.ndarray:
        return self.gradients[0][:, 0].copy()

    def gradient(self, t: float, side: str = "right") -> np.ndarray:
        i = self.trajectory.segment_index(t, side)
        seg = self.trajectory.segments[i]
        return np.array([np.interp(t, seg.t, row) for row in self.gradients[i]])


def _feedback_batch(hinput: HybridInput, q, t, X):
    """Feedback at times ``t`` (K,) and states ``X`` (n, K), vectorised when possible."""
    try:
        u = np.asarray(hinput.control(t, q, X), dtype=float)
        if u.ndim == 2 and u.shape[1] == X.shape[1]:
            return u
    except Exception:
        pass
    return np.concatenate([np.asarray(hinput.control(float(t[k]), q, X[:, k:k + 1]), dtype=float).reshape(-1, 1)
                           for k in range(X.shape[1])], axis=1)


def _closed_loop_terms(sys, cost, hinput, q, t, X, U):
    """``A = f_x + f_u u_x`` (n, n, K) and ``b = l_x + u_x^T l_u`` (n, K)."""
    n, K = X.shape
    d = fd_step(X)
    ux = np.empty((U.shape[0], n, K))
    for i in range(n):
        Xp, Xm = X.copy(), X.copy()
        Xp[i] += d[i]
        Xm[i] -= d[i]
        ux[:, i] = (_feedback_batch(hinput, q, t, Xp) - _feedback_batch(hinput, q, t, Xm)) / (2 * d[i])
    fx = sys.jacobian_x(q, X, U)
    fu = sys.jacobian_u(q, X, U)
    lx = cost.running_grad_x(q, X, U)
    lu = cost.running_grad_control(q, X, U)
    A = fx + np.einsum("imk,mjk->ijk", fu, ux)
    b = lx + np.einsum("mjk,mk->jk", ux, lu)
    return A, b


def _backward_linear(t, A0, b0, Am, bm, A1, b1, y_end):
    """RK4 backward for ``y' = -(A^T y + b)`` with data at step starts, midpoints and ends.

    Each RK4 step of a linear ODE is an affine map ``y_k = M_k y_{k+1} + v_k``;
    the maps are formed for all steps at once and then chained.
    """
    K = len(t)
    n = len(y_end)
    h = np.diff(t)[:, None, None]
    I = np.eye(n)
    # stage slopes k_i = P_i y + q_i with batch axis first
    N1, Nm, N0 = (-np.transpose(A, (2, 1, 0)) for A in (A1, Am, A0))
    c1, cm, c0 = (-b.T[:, :, None] for b in (b1, bm, b0))
    P1, q1 = N1, c1
    P2 = Nm @ (I - 0.5 * h * P1)
    q2 = Nm @ (-0.5 * h * q1) + cm
    P3 = Nm @ (I - 0.5 * h * P2)
    q3 = Nm @ (-0.5 * h * q2) + cm
    P4 = N0 @ (I - h * P3)
    q4 = N0 @ (-h * q3) + c0
    M = I - (h / 6.0) * (P1 + 2.0 * (P2 + P3) + P4)
    v = (-(h / 6.0) * (q1 + 2.0 * (q2 + q3) + q4))[:, :, 0]
    Y = np.empty((n, K))
    y = np.array(y_end, dtype=float)
    Y[:, -1] = y
    for k in range(K - 2, -1, -1):
        y = M[k] @ y + v[k]
        Y[:, k] = y
    if not np.all(np.isfinite(Y)):
        raise HybridError("cost sensitivity is not finite")
    return Y


def propagate_sensitivity(sys: HybridSystem, cost: CostSpec, feedback, q0: str, x0, span, events=(),
                          switch_times=(), cfg: IntegratorConfig = IntegratorConfig(step=1e-4),
                          q_sequence=None, trajectory=None) -> SensitivityTrajectory:
    """Simulate a feedback and integrate the gradient of its cost-to-go backward.

    ``feedback`` is a :class:`HybridInput` or a callable ``u(t, q, x)``;
    ``events``/``switch_times`` give the controlled switches when a callable
    is passed.  Along each segment the gradient obeys
    ``y' = -((f_x + f_u u_x)^T y + l_x + u_x^T l_u)``, ends at ``grad g``
    and jumps as ``y- = xi_x^T y+ + p grad m + grad c``.  At an autonomous
    switch ``p`` follows from equating the time derivatives of the value
    on both sides of the surface:
    ``p = [y+ . (f+ - xi_x f-) + l+ - l- - grad c . f-] / grad m . f-``;
    ``p = 0`` at controlled switches.  A ``trajectory`` already simulated
    under the same feedback from ``(q0, x0)`` skips the forward pass.
    """
    if isinstance(feedback, HybridInput):
        hinput = feedback
    else:
        hinput = HybridInput(feedback, tuple(zip(switch_times, events)))
    traj = trajectory if trajectory is not None else simulate(sys, hinput, q0, x0, span, cfg)
    if q_sequence is not None and tuple(q_sequence) != traj.discrete_path:
        raise HybridError(f"feedback visits {traj.discrete_path}, expected {tuple(q_sequence)}")
    segs = traj.segments
    grads = [None] * len(segs)
    p_values = {}
    y = cost.terminal_gradient(traj.final_state)
    for i in range(len(segs) - 1, -1, -1):
        seg = segs[i]
        if i < len(segs) - 1:
            sw = traj.switches[i]
            y = _switch_condition(sys, cost, sw, grads[i + 1][:, 0], seg.u1[:, -1] if seg.u1.shape[1] else None,
                                  segs[i + 1].u0[:, 0] if segs[i + 1].u0.shape[1] else None, cfg, p_values, i,
                                  hinput)
        if len(seg.t) < 2:
            grads[i] = y[:, None].copy()
            continue
        t = seg.t
        t1 = np.nextafter(t[1:], t[:-1])
        tm, xm = seg.midpoints()
        um = _feedback_batch(hinput, seg.q, tm, xm)
        A0, b0 = _closed_loop_terms(sys, cost, hinput, seg.q, t[:-1], seg.x[:, :-1], seg.u0)
        Am, bm = _closed_loop_terms(sys, cost, hinput, seg.q, tm, xm, um)
        A1, b1 = _closed_loop_terms(sys, cost, hinput, seg.q, t1, seg.x[:, 1:], seg.u1)
        grads[i] = _backward_linear(t, A0, b0, Am, bm, A1, b1, y)
        y = grads[i][:, 0]
    return SensitivityTrajectory(traj, grads, p_values)


def _switch_condition(sys, cost, sw, y_plus, u_minus, u_plus, cfg, p_values, j, hinput):
    jm = sys.jump_map(sw.sigma)
    xi_x = np.atleast_2d(jm.jac(sw.x_minus))
    gc = np.asarray(cost.switch_grad(sw.sigma, sw.x_minus), dtype=float)
    y = xi_x.T @ y_plus + gc
    if sw.kind == AUTONOMOUS:
        man = sys.manifolds[(sw.q_from, sw.q_to)]
        if u_minus is None:
            u_minus = np.asarray(hinput.control(np.nextafter(sw.t, -np.inf), sw.q_from, sw.x_minus[:, None]))[:, 0]
        if u_plus is None:
            u_plus = np.asarray(hinput.control(sw.t, sw.q_to, sw.x_plus[:, None]))[:, 0]
        f_m = sys.field(sw.q_from, sw.x_minus[:, None], u_minus[:, None])[:, 0]
        f_p = sys.field(sw.q_to, sw.x_plus[:, None], u_plus[:, None])[:, 0]
        l_m = float(np.ravel(cost.running_cost(sw.q_from, sw.x_minus[:, None], u_minus[:, None]))[0])
        l_p = float(np.ravel(cost.running_cost(sw.q_to, sw.x_plus[:, None], u_plus[:, None]))[0])
        gm = np.asarray(man.gradient(sw.x_minus), dtype=float)
        den = float(gm @ f_m)
        if abs(den) < cfg.transversality_floor:
            raise HybridError(f"crossing at t = {sw.t:.6g} is not transversal (grad m . f = {den:.2e})")
        p = (y_plus @ (f_p - xi_x @ f_m) + (l_p - l_m) - gc @ f_m) / den
        p_values[j] = float(p)
        y = y + p * gm
    return y


# --- export ------------------------------------------------------------------

_MAGIC = b"HYVG"


def export_csv(grid: ValueGrid, path, every: int = 1) -> None:
    """Flat table ``t, x1..xn, V, u1..um`` (one row per node and kept slice)."""
    mesh = np.meshgrid(*grid.x_nodes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    m = grid.control_table.shape[1]
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(grid.dim)] + ["V"] + [f"u{i + 1}" for i in range(m)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for k in range(0, len(grid.t_nodes), every):
            V = grid.values[k].ravel()
            U = grid.control_table[k].reshape(m, -1).T.astype(float)
            block = np.column_stack([np.full(len(V), grid.t_nodes[k]), X, V, U])
            np.savetxt(fh, block, delimiter=",", fmt="%.10g")


def export_binary(grid: ValueGrid, path) -> None:
    """Little-endian layout: magic ``HYVG``, int32 ``d, m, nt`` and ``n_1..n_d``,
    then float64 time nodes, each axis, values ``(nt, n_1, .., n_d)`` and
    controls ``(nt, m, n_1, .., n_d)``."""
    m = grid.control_table.shape[1]
    dims = [len(a) for a in grid.x_nodes]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<" + "i" * (3 + grid.dim), grid.dim, m, len(grid.t_nodes), *dims))
        for arr in [grid.t_nodes, *grid.x_nodes, grid.values, grid.control_table]:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_binary(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a value-grid file")
    d, m, nt = struct.unpack_from("<iii", data, 4)
    dims = struct.unpack_from("<" + "i" * d, data, 16)
    flat = np.frombuffer(data, dtype="<f8", offset=16 + 4 * d)
    pos = 0
    t = flat[pos:pos + nt]
    pos += nt
    axes = []
    for n in dims:
        axes.append(flat[pos:pos + n])
        pos += n
    size = int(np.prod(dims))
    values = flat[pos:pos + nt * size].reshape((nt,) + tuple(dims))
    pos += nt * size
    controls = flat[pos:pos + nt * m * size].reshape((nt, m) + tuple(dims))
    return {"t": t, "axes": axes, "values": values, "controls": controls}
