"""Riccati synthesis for linear-quadratic hybrid tracking problems.

Per location ``x' = A x + B u + F``, cost
``1/2 |x - r|_L^2 + 1/2 |u|_R^2`` while running, ``1/2 |x - d|_C^2`` at a
switch, ``1/2 |x - d_T|_G^2`` at the end; affine jumps ``x+ = P x- + J`` and
affine switching surfaces ``m x + n = 0``.  The adjoint is affine in the
state, ``lam = K x + s``, and the optimal feedback is
``u = -R^{-1} B^T (K x + s)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import (
    AUTONOMOUS,
    CONTROLLED,
    Box,
    CostSpec,
    HybridError,
    HybridProblem,
    HybridSystem,
    HybridTrajectory,
    JumpMap,
    Manifold,
    Segment,
    SwitchCost,
    SwitchRecord,
)
from .newton import NewtonError, newton
from .simulate import BlowUpError, IntegratorConfig, knot_times


def _at(v, t):
    return np.atleast_1d(np.asarray(v(t) if callable(v) else v, dtype=float))


def _mat(v, t):
    return np.atleast_2d(np.asarray(v(t) if callable(v) else v, dtype=float))


def _lin(M, v):
    """``M @ v`` over the leading axis of a batched ``v``."""
    v = np.asarray(v, dtype=float)
    return (M @ v.reshape(v.shape[0], -1)).reshape((M.shape[0],) + v.shape[1:])


def _shift(v, x):
    return v.reshape(v.shape + (1,) * (np.ndim(x) - 1))


@dataclass(frozen=True)
class LqLocation:
    A: object
    B: object
    F: object = None

    def dims(self):
        A = _mat(self.A, 0.0)
        B = _mat(self.B, 0.0)
        return A.shape[0], B.shape[1]

    def F_at(self, t):
        n = self.dims()[0]
        return np.zeros(n) if self.F is None else _at(self.F, t)


@dataclass(frozen=True)
class LqHybridSystem:
    """Linear locations with affine jumps ``(P, J)`` and surfaces ``(m, n)``."""

    locations: Mapping[str, LqLocation]
    automaton: Mapping[tuple, str] = field(default_factory=dict)
    jumps: Mapping[str, tuple] = field(default_factory=dict)
    manifolds: Mapping[tuple, tuple] = field(default_factory=dict)

    def __post_init__(self):
        for (q, sigma), r in self.automaton.items():
            nq, nr = self.dim(q), self.dim(r)
            P, J = self.jump(sigma, nq)
            if P.shape != (nr, nq) or J.shape != (nr,):
                raise ValueError(f"jump {sigma} has shape {P.shape}, expected {(nr, nq)}")

    def dim(self, q):
        return self.locations[q].dims()[0]

    def jump(self, sigma, n=None):
        if sigma not in self.jumps:
            return np.eye(n), np.zeros(n)
        P, J = self.jumps[sigma]
        P = np.atleast_2d(np.asarray(P, dtype=float))
        J = np.zeros(P.shape[0]) if J is None else np.atleast_1d(np.asarray(J, dtype=float))
        return P, J

    def surface(self, p, q):
        m, n = self.manifolds[(p, q)]
        return np.atleast_1d(np.asarray(m, dtype=float)), float(n)

    def to_hybrid(self, umax: float = 1e8) -> HybridSystem:
        """General hybrid system with the same (time-invariant) data.

        The control box is made wide enough to be inactive.
        """
        fields, jacs, ujacs, boxes, dims = {}, {}, {}, {}, {}
        for q, loc in self.locations.items():
            if callable(loc.A) or callable(loc.B) or callable(loc.F):
                raise ValueError("only time-invariant locations convert to a general hybrid system")
            A, B, F = _mat(loc.A, 0.0), _mat(loc.B, 0.0), loc.F_at(0.0)
            fields[q] = (lambda A, B, F: lambda x, u: _lin(A, x) + _lin(B, u) + _shift(F, x))(A, B, F)
            jacs[q] = (lambda A: lambda x, u: A)(A)
            ujacs[q] = (lambda B: lambda x, u: B)(B)
            boxes[q] = Box(-umax * np.ones(B.shape[1]), umax * np.ones(B.shape[1]))
            dims[q] = A.shape[0]
        jmaps = {}
        for (q, sigma), r in self.automaton.items():
            P, J = self.jump(sigma, dims[q])
            jmaps[sigma] = JumpMap((lambda P, J: lambda x: P @ x + J)(P, J), (lambda P: lambda x: P)(P))
        mans = {}
        for key in self.manifolds:
            m, n = self.surface(*key)
            mans[key] = Manifold((lambda m, n: lambda x: float(m @ x) + n if np.ndim(x) == 1 else m @ x + n)(m, n),
                                 (lambda m: lambda x: m)(m))
        return HybridSystem(dims, fields, boxes, dict(self.automaton), jmaps, mans, jacs, ujacs)


def _check_psd(name, M, floor):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(M)
    if ev.min() < floor:
        raise ValueError(f"{name} violates its definiteness bound (min eigenvalue {ev.min():.3g})")


@dataclass(frozen=True)
class LqCost:
    """Quadratic tracking cost.

    ``L``/``R``/``r`` per location (constants or callables of ``t``), ``C``/``d``
    per event, terminal ``G`` and ``dT``.  Missing ``C``/``d``/``r`` are zero.
    """

    L: Mapping[str, object]
    R: Mapping[str, object]
    G: object
    r: Mapping[str, object] = field(default_factory=dict)
    C: Mapping[str, object] = field(default_factory=dict)
    d: Mapping[str, object] = field(default_factory=dict)
    dT: object = None

    def __post_init__(self):
        for q, v in self.L.items():
            if not callable(v):
                _check_psd(f"L[{q}]", v, -1e-12)
        for q, v in self.R.items():
            if not callable(v):
                _check_psd(f"R[{q}]", v, 1e-12)
        for s, v in self.C.items():
            _check_psd(f"C[{s}]", v, -1e-12)
        _check_psd("G", self.G, -1e-12)

    def r_at(self, q, t, n):
        v = self.r.get(q)
        return np.zeros(n) if v is None else _at(v, t)

    def C_of(self, sigma, n):
        v = self.C.get(sigma)
        return np.zeros((n, n)) if v is None else _mat(v, 0.0)

    def d_of(self, sigma, n):
        v = self.d.get(sigma)
        return np.zeros(n) if v is None else _at(v, 0.0)

    def dT_of(self, n):
        return np.zeros(n) if self.dT is None else _at(self.dT, 0.0)

    def to_cost(self, dims: Mapping[str, int]) -> CostSpec:
        """General cost with the same data (time-invariant weights only)."""
        running, rgrad, rgu = {}, {}, {}
        for q, n in dims.items():
            L, R = _mat(self.L[q], 0.0), _mat(self.R[q], 0.0)
            r = self.r_at(q, 0.0, n)

            def l(x, u, L=L, R=R, r=r):
                e = x - _shift(r, x)
                return 0.5 * np.sum(e * _lin(L, e), axis=0) + 0.5 * np.sum(u * _lin(R, u), axis=0)

            running[q] = l
            rgrad[q] = (lambda L, r: lambda x, u: _lin(L, x - _shift(r, x)))(L, r)
            rgu[q] = (lambda R: lambda x, u: _lin(R, u))(R)
        switching = {}
        for sigma in self.C:
            C = _mat(self.C[sigma], 0.0)
            d = self.d_of(sigma, C.shape[0])
            switching[sigma] = SwitchCost((lambda C, d: lambda x: 0.5 * float((x - d) @ C @ (x - d)))(C, d),
                                          (lambda C, d: lambda x: C @ (x - d))(C, d))
        G = _mat(self.G, 0.0)
        dT = self.dT_of(G.shape[0])
        return CostSpec(running, rgrad, rgu, switching,
                        lambda x: 0.5 * float((x - dT) @ G @ (x - dT)), lambda x: G @ (x - dT))


def feedback(K, s, x, B, R):
    """``u = -R^{-1} B^T (K x + s)``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    try:
        fac = cho_factor(R)
    except np.linalg.LinAlgError:
        raise ValueError("R must be symmetric positive definite") from None
    lam = np.atleast_2d(K) @ np.atleast_1d(np.asarray(x, dtype=float)) + np.atleast_1d(s)
    return -cho_solve(fac, B.T @ lam)


def hamiltonian_min_value(t, x, K, s, A, B, R, L, F, r):
    """Minimised LQ Hamiltonian ``1/2|x-r|_L^2 + (Kx+s)^T (A x - 1/2 B R^{-1} B^T (Kx+s) + F)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    K, A, B, R, L = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (K, A, B, R, L))
    s, F, r = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (s, F, r))
    lam = K @ x + s
    e = x - r
    S = B @ cho_solve(cho_factor(R), B.T)
    return float(0.5 * e @ L @ e + lam @ (A @ x - 0.5 * S @ lam + F))


def switch_jump(K_plus, s_plus, P, C, Jvec, p, m, d, x_minus=None):
    """Riccati data just before a switch.

    ``K- = P^T K+ P + C`` and ``s- = P^T s+ + p m^T - C d + P^T K+ J``.
    The relation holds for every ``x(t_j-)`` on the surface, so
    ``x_minus`` is not needed; it is accepted for call-site symmetry.
    """
    K_plus = np.atleast_2d(np.asarray(K_plus, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    s_plus = np.atleast_1d(np.asarray(s_plus, dtype=float))
    Jvec = np.atleast_1d(np.asarray(Jvec, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    m = np.zeros(P.shape[1]) if m is None else np.atleast_1d(np.asarray(m, dtype=float))
    K_minus = P.T @ K_plus @ P + C
    s_minus = P.T @ s_plus + p * m - C @ d + P.T @ K_plus @ Jvec
    return 0.5 * (K_minus + K_minus.T), s_minus


@dataclass
class RiccatiPath:
    """Backward solution on one interval, stored in increasing time.

    ``w`` is the constant term of the quadratic value
    ``V = 1/2 x^T K x + s^T x + w``; ``X`` the backward closed-loop
    transition used to monitor the nonsingularity behind ``lam = K x + s``.
    """

    t: np.ndarray
    K: np.ndarray  # (N, n, n)
    s: np.ndarray  # (N, n)
    w: np.ndarray  # (N,)
    Kdot: np.ndarray
    sdot: np.ndarray
    cond: float

    def _herm(self, t, Y, Yd):
        tt = np.atleast_1d(t)
        k = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[k + 1] - self.t[k]
        u = (tt - self.t[k]) / h
        sh = (len(tt),) + (1,) * (Y.ndim - 1)
        u, h = u.reshape(sh), h.reshape(sh)
        h00 = (1 + 2 * u) * (1 - u) ** 2
        h10 = u * (1 - u) ** 2
        h01 = u * u * (3 - 2 * u)
        h11 = u * u * (u - 1)
        out = h00 * Y[k] + h10 * h * Yd[k] + h01 * Y[k + 1] + h11 * h * Yd[k + 1]
        return out[0] if np.ndim(t) == 0 else out

    def K_at(self, t):
        return self._herm(t, self.K, self.Kdot)

    def s_at(self, t):
        return self._herm(t, self.s, self.sdot)

    def w_at(self, t):
        return np.interp(t, self.t, self.w)


class _StageData:
    """Location data ``(A, S, L, F, r, Lr)`` with ``S = B R^{-1} B^T``."""

    def __init__(self, A, B, L, R, F, r, n):
        self.raw = (A, B, L, R, F, r)
        self.n = n
        self.const = not any(callable(v) for v in self.raw)
        if self.const:
            self.fixed = self._eval(0.0)

    def _eval(self, t):
        A, B, L, R, F, r = self.raw
        Am, Bm, Lm, Rm = _mat(A, t), _mat(B, t), _mat(L, t), _mat(R, t)
        Fv = np.zeros(self.n) if F is None else _at(F, t)
        rv = np.zeros(self.n) if r is None else _at(r, t)
        try:
            fac = cho_factor(Rm)
        except np.linalg.LinAlgError:
            raise ValueError(f"R is not positive definite at t = {t}") from None
        return Am, Bm @ cho_solve(fac, Bm.T), Lm, Fv, rv, Lm @ rv

    def at(self, t):
        """Data at the times ``t`` (one per column), stacked along a leading axis."""
        if self.const:
            return tuple(v[None] for v in self.fixed)
        parts = [self._eval(float(tb)) for tb in np.atleast_1d(t)]
        return tuple(np.stack(vs) for vs in zip(*parts))


def _bmv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def _backward_batch(data: _StageData, Y_end, w_end, ta, tb, N):
    """Lockstep RK4 of the packed Riccati state ``Y = [K | s | X]`` on ``N``
    uniform steps per column, from ``tb`` down to ``ta``.

    With ``M = A^T - K S``: ``K' = -L - M K - K A``, ``s' = -M s - K F + L r``
    and ``X' = M^T X``.  The offset ``w' = -(1/2 r^T L r - 1/2 s^T S s + s^T F)``
    depends on ``s`` only and is integrated afterwards by Simpson's rule.
    Returns knots ``(N+1, B)``, ``Y`` and ``Y'`` ``(N+1, B, n, 2n+1)``, ``w``
    ``(N+1, B)``, the worst condition number of ``X`` per column and a mask
    of columns that blew up.
    """
    n = data.n
    Bn = Y_end.shape[0]
    grid = np.linspace(0.0, 1.0, N + 1)[:, None]
    knots = ta[None, :] + (tb - ta)[None, :] * grid
    h = (ta - tb) / N

    if data.const:
        A, S, L, F, r, Lr = data.fixed
        AT = A.T.copy()
        W = np.concatenate((A, F[:, None]), 1)
        L0 = np.concatenate((L, -Lr[:, None]), 1)

        def rhs(t, Y):
            K = Y[..., :n]
            M = AT - K @ S
            dKs = -L0 - M @ Y[..., :n + 1] - K @ W
            return np.concatenate((dKs, np.swapaxes(M, -1, -2) @ Y[..., n + 1:]), axis=-1)
    else:
        def rhs(t, Y):
            A, S, L, F, r, Lr = data.at(t)
            K = Y[..., :n]
            M = np.swapaxes(A, -1, -2) - K @ S
            W = np.concatenate((A, F[..., None]), -1)
            L0 = np.concatenate((L, -Lr[..., None]), -1)
            dKs = -L0 - M @ Y[..., :n + 1] - K @ W
            return np.concatenate((dKs, np.swapaxes(M, -1, -2) @ Y[..., n + 1:]), axis=-1)

    Ys = np.empty((N + 1, Bn, n, 2 * n + 1))
    Yd = np.empty_like(Ys)
    Y = Y_end.copy()
    Ys[N] = Y
    a = rhs(knots[N], Y)
    Yd[N] = a
    hh = h[:, None, None]
    cond = np.ones(Bn)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N, 0, -1):
            tm = knots[k] + 0.5 * h
            b = rhs(tm, Y + 0.5 * hh * a)
            c = rhs(tm, Y + 0.5 * hh * b)
            d = rhs(knots[k - 1], Y + hh * c)
            Y = Y + (hh / 6) * (a + 2 * (b + c) + d)
            K = Y[..., :n]
            Y[..., :n] = 0.5 * (K + np.swapaxes(K, -1, -2))
            Ys[k - 1] = Y
            a = rhs(knots[k - 1], Y)
            Yd[k - 1] = a
            if k % 32 == 1:
                X = Y[..., n + 1:]
                ok = np.all(np.isfinite(X), axis=(-1, -2))
                if ok.any():
                    cond[ok] = np.maximum(cond[ok], np.linalg.cond(X[ok]))
    bad = ~np.all(np.isfinite(Ys[..., :n + 1]), axis=(0, 2, 3))
    # offset by Simpson's rule with Hermite midpoints of s
    s, sd = Ys[..., n], Yd[..., n]
    hf = -h[:, None]
    smid = 0.5 * (s[:-1] + s[1:]) + (hf / 8) * (sd[:-1] - sd[1:])
    tmid = 0.5 * (knots[:-1] + knots[1:])

    def g(t, sv):
        if data.const:
            A, S, L, F, r, Lr = data.fixed
            return 0.5 * r @ Lr - 0.5 * np.sum(sv * (sv @ S), -1) + sv @ F
        out = np.empty(sv.shape[:-1])
        for idx in np.ndindex(*sv.shape[:-1]):
            A, S, L, F, r, Lr = data._eval(float(t[idx]))
            out[idx] = 0.5 * r @ Lr - 0.5 * sv[idx] @ S @ sv[idx] + sv[idx] @ F
        return out

    gk, gm = g(knots, s), g(tmid, smid)
    with np.errstate(invalid="ignore"):
        inc = (-h / 6) * (gk[:-1] + 4 * gm + gk[1:])
    ws = np.empty((N + 1, Bn))
    ws[N] = w_end
    ws[:N] = w_end + np.cumsum(inc[::-1], axis=0)[::-1]
    return knots, Ys, Yd, ws, cond, bad


def _steps(width, step):
    return max(2, int(math.ceil(width / step - 1e-9)))


def _path(knots, Ys, Yd, ws, cond, b, n) -> "RiccatiPath":
    return RiccatiPath(knots[:, b].copy(), np.ascontiguousarray(Ys[:, b, :, :n]), np.ascontiguousarray(Ys[:, b, :, n]),
                       ws[:, b].copy(), np.ascontiguousarray(Yd[:, b, :, :n]), np.ascontiguousarray(Yd[:, b, :, n]),
                       float(cond[b]))


def _warn_cond(cond):
    if cond > 1e8:
        warnings.warn(f"backward Riccati flow is ill conditioned (condition {cond:.2e})", RuntimeWarning)


def riccati_backward(A, B, L, R, F, r, K_end, s_end, span, cfg: IntegratorConfig = IntegratorConfig(),
                     w_end: float = 0.0) -> RiccatiPath:
    """RK4 backward integration of the matrix Riccati and offset equations.

    ``K' = -L - K A - A^T K + K S K``, ``s' = -(A^T - K S) s - K F + L r``
    with ``S = B R^{-1} B^T`` on a uniform grid no coarser than
    ``cfg.step``; ``K`` is symmetrised after every step.  The data may be
    constants or callables of ``t``.  Alongside runs ``X' = (A - S K) X``,
    ``X(t_b) = I``: ``lam = K x + s`` exists exactly while ``X`` stays
    invertible, so its condition number is monitored and a warning is
    issued above ``1e8``.
    """
    t_a, t_b = float(span[0]), float(span[1])
    if not t_b > t_a:
        raise ValueError("empty interval")
    K_end = np.atleast_2d(np.asarray(K_end, dtype=float))
    n = K_end.shape[0]
    data = _StageData(A, B, L, R, F, r, n)
    Y = np.concatenate((0.5 * (K_end + K_end.T), np.atleast_1d(np.asarray(s_end, dtype=float))[:, None], np.eye(n)), 1)
    out = _backward_batch(data, Y[None], np.array([float(w_end)]), np.array([t_a]), np.array([t_b]),
                          _steps(t_b - t_a, cfg.step))
    knots, Ys, Yd, ws, cond, bad = out
    if bad[0]:
        k = int(np.nonzero(~np.all(np.isfinite(Ys[:, 0, :, :n + 1]), axis=(1, 2)))[0].max())
        raise BlowUpError(float(knots[k, 0]), "Riccati matrix")
    _warn_cond(cond[0])
    return _path(knots, Ys, Yd, ws, cond, 0, n)


@dataclass
class RiccatiSolution:
    """Stage-wise Riccati paths plus the closed-loop trajectory.

    ``switch_records`` hold ``t``, ``p`` and the Riccati data on both sides.
    """

    stages: list
    locations: tuple
    switch_records: list
    trajectory: HybridTrajectory
    sys: LqHybridSystem
    cost: LqCost
    residual_norm: float = 0.0
    roots: list = field(default_factory=list)

    def stage_index(self, t, side="right", stage=None):
        """Stage active at ``t``; ``stage`` overrides the lookup."""
        if stage is not None:
            return int(stage)
        times = [rec["t"] for rec in self.switch_records]
        return int(np.searchsorted(times, t, side=side))

    def K(self, t, side="right", stage=None):
        return self.stages[self.stage_index(t, side, stage)].K_at(t)

    def s(self, t, side="right", stage=None):
        return self.stages[self.stage_index(t, side, stage)].s_at(t)

    def _BR(self, t, q):
        loc = self.sys.locations[q]
        B, R = _mat(loc.B, t), _mat(self.cost.R[q], t)
        return B, R

    def gain(self, t, side="right", stage=None):
        """``R^{-1} B^T K(t)``."""
        i = self.stage_index(t, side, stage)
        B, R = self._BR(t, self.locations[i])
        return cho_solve(cho_factor(R), B.T @ self.stages[i].K_at(t))

    def offset(self, t, side="right", stage=None):
        """``R^{-1} B^T s(t)``."""
        i = self.stage_index(t, side, stage)
        B, R = self._BR(t, self.locations[i])
        return cho_solve(cho_factor(R), B.T @ self.stages[i].s_at(t))

    def adjoint(self, t, x, side="right", stage=None):
        return self.K(t, side, stage) @ np.asarray(x, dtype=float) + self.s(t, side, stage)

    def value(self, t, x, side="right", stage=None):
        """Quadratic value ``1/2 x^T K x + s^T x + w`` of the current stage."""
        st = self.stages[self.stage_index(t, side, stage)]
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ st.K_at(t) @ x + st.s_at(t) @ x + st.w_at(t))

    def cost_value(self) -> float:
        return self.value(self.trajectory.t0, self.trajectory.segments[0].x[:, 0])


def _hmin(x, lam, A, S, L, F, r):
    e = x - r
    return 0.5 * np.sum(e * _bmv(L, e), -1) + np.sum(lam * (_bmv(A, x) - 0.5 * _bmv(S, lam) + F), -1)


class _Tracker:
    """Backward Riccati sweep plus forward closed loop, batched over parameter columns."""

    def __init__(self, sys, cost, q0, events, kinds, x0, span, cfg):
        self.sys, self.cost, self.cfg = sys, cost, cfg
        self.events = tuple(events)
        qs = [q0]
        for sigma in events:
            try:
                qs.append(sys.automaton[(qs[-1], sigma)])
            except KeyError:
                raise HybridError(f"transition not defined for ({qs[-1]}, {sigma})") from None
        self.qs = tuple(qs)
        if kinds is None:
            kinds = tuple(AUTONOMOUS if (a, b) in sys.manifolds else CONTROLLED for a, b in zip(qs, qs[1:]))
        self.kinds = tuple(kinds)
        self.aut = [j for j, k in enumerate(self.kinds) if k == AUTONOMOUS]
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.t0, self.tf = float(span[0]), float(span[1])
        self.L = len(self.events)
        self.data = []
        for q in self.qs:
            loc = sys.locations[q]
            self.data.append(_StageData(loc.A, loc.B, cost.L[q], cost.R[q], loc.F, cost.r.get(q), sys.dim(q)))
        self.jumps = []
        for j, sigma in enumerate(self.events):
            n = sys.dim(self.qs[j])
            P, J = sys.jump(sigma, n)
            C, d = cost.C_of(sigma, n), cost.d_of(sigma, n)
            m, nn = sys.surface(self.qs[j], self.qs[j + 1]) if j in self.aut else (np.zeros(n), 0.0)
            self.jumps.append((P, J, C, d, m, nn))

    def unpack(self, Z):
        """Times ``(L+2, B)`` including the horizon ends and ``p`` ``(L, B)``."""
        Bn = Z.shape[1]
        T = np.vstack((np.full(Bn, self.t0), Z[:self.L], np.full(Bn, self.tf)))
        ps = np.zeros((self.L, Bn))
        for i, j in enumerate(self.aut):
            ps[j] = Z[self.L + i]
        return T, ps

    def run(self, Z):
        T, ps = self.unpack(Z)
        Bn = Z.shape[1]
        bad = ~np.all(np.diff(T, axis=0) > 0, axis=0)
        if bad.all():
            return None, bad
        Tc = T.copy()
        # columns with an invalid ordering get a harmless schedule and are discarded later
        Tc[:, bad] = np.linspace(self.t0, self.tf, self.L + 2)[:, None]
        nL = self.sys.dim(self.qs[-1])
        G = _mat(self.cost.G, 0.0)
        dT = self.cost.dT_of(nL)
        Y = np.broadcast_to(np.concatenate((G, (-G @ dT)[:, None], np.eye(nL)), 1), (Bn, nL, 2 * nL + 1)).copy()
        w = np.full(Bn, 0.5 * float(dT @ G @ dT))
        stages = [None] * (self.L + 1)
        recs = [None] * self.L
        for i in range(self.L, -1, -1):
            n = self.data[i].n
            N = _steps(float(np.max(Tc[i + 1] - Tc[i])), self.cfg.step)
            out = _backward_batch(self.data[i], Y, w, Tc[i], Tc[i + 1], N)
            stages[i] = out
            bad |= out[5]
            if i > 0:
                j = i - 1
                P, J, C, d, m, nn = self.jumps[j]
                Yp, wp = out[1][0], out[3][0]
                Kp, sp = Yp[..., :n], Yp[..., n]
                Km = np.einsum("ki,bkl,lj->bij", P, Kp, P) + C
                Km = 0.5 * (Km + np.swapaxes(Km, -1, -2))
                sm = sp @ P + ps[j][:, None] * m[None] - C @ d + _bmv(Kp, J[None]) @ P
                w = wp + 0.5 * _bmv(Kp, J[None]) @ J + sp @ J + 0.5 * d @ C @ d + ps[j] * nn
                recs[j] = dict(K_plus=Kp, s_plus=sp, K_minus=Km, s_minus=sm)
                nm = Km.shape[-1]
                Y = np.concatenate((Km, sm[..., None], np.broadcast_to(np.eye(nm), Km.shape)), -1)
        # forward closed loop on the backward knots
        x = np.broadcast_to(self.x0, (Bn, len(self.x0))).copy()
        fw = []
        for i, (knots, Ys, Yd, ws, cond, _) in enumerate(stages):
            n = self.data[i].n
            N = knots.shape[0] - 1
            h = (knots[1] - knots[0])[:, None]
            K, s, Kd, sd = Ys[..., :n], Ys[..., n], Yd[..., :n], Yd[..., n]
            Kmid = 0.5 * (K[:-1] + K[1:]) + (h[..., None] / 8) * (Kd[:-1] - Kd[1:])
            smid = 0.5 * (s[:-1] + s[1:]) + (h / 8) * (sd[:-1] - sd[1:])
            A, S, L, F, r, Lr = self.data[i].at(knots[0]) if self.data[i].const else (None,) * 6
            if self.data[i].const:
                Acl, bcl = A - S @ K, F - _bmv(S, s)
                Aclm, bclm = A - S @ Kmid, F - _bmv(S, smid)
            else:
                Acl, bcl, Aclm, bclm = self._closed_loop(i, knots, K, s, Kmid, smid)
            X = np.empty((N + 1, Bn, n))
            D0 = np.empty((N, Bn, n))
            D1 = np.empty((N, Bn, n))
            X[0] = x
            with np.errstate(over="ignore", invalid="ignore"):
                for k in range(N):
                    k1 = _bmv(Acl[k], x) + bcl[k]
                    k2 = _bmv(Aclm[k], x + 0.5 * h * k1) + bclm[k]
                    k3 = _bmv(Aclm[k], x + 0.5 * h * k2) + bclm[k]
                    k4 = _bmv(Acl[k + 1], x + h * k3) + bcl[k + 1]
                    x = x + (h / 6) * (k1 + 2 * (k2 + k3) + k4)
                    X[k + 1] = x
                    D0[k], D1[k] = k1, k4
            bad |= ~np.all(np.isfinite(X), axis=(0, 2))
            fw.append((X, D0, D1))
            if i < self.L:
                P, J = self.jumps[i][:2]
                recs[i]["x_minus"] = x.copy()
                x = x @ P.T + J
                recs[i]["x_plus"] = x.copy()
        return dict(T=Tc, ps=ps, stages=stages, recs=recs, fw=fw), bad

    def _closed_loop(self, i, knots, K, s, Kmid, smid):
        N = knots.shape[0] - 1
        Acl, bcl = np.empty_like(K), np.empty_like(s)
        Aclm, bclm = np.empty_like(Kmid), np.empty_like(smid)
        for k in range(N + 1):
            A, S, L, F, r, Lr = self.data[i].at(knots[k])
            Acl[k], bcl[k] = A - S @ K[k], F - _bmv(S, s[k])
            if k < N:
                A, S, L, F, r, Lr = self.data[i].at(0.5 * (knots[k] + knots[k + 1]))
                Aclm[k], bclm[k] = A - S @ Kmid[k], F - _bmv(S, smid[k])
        return Acl, bcl, Aclm, bclm

    def residual(self, Z):
        res, bad = self.run(Z)
        out = np.full((self.L + len(self.aut), Z.shape[1]), np.inf)
        if res is None:
            return out
        T, recs = res["T"], res["recs"]
        for j in range(self.L):
            rc = recs[j]
            n0, n1 = self.data[j].n, self.data[j + 1].n
            A0, S0, L0, F0, r0, _ = self.data[j].at(T[j + 1])
            A1, S1, L1, F1, r1, _ = self.data[j + 1].at(T[j + 1])
            lm = _bmv(rc["K_minus"], rc["x_minus"]) + rc["s_minus"]
            lp = _bmv(rc["K_plus"], rc["x_plus"]) + rc["s_plus"]
            out[j] = _hmin(rc["x_minus"], lm, A0, S0, L0, F0, r0) - _hmin(rc["x_plus"], lp, A1, S1, L1, F1, r1)
        for i, j in enumerate(self.aut):
            m, nn = self.jumps[j][4:]
            out[self.L + i] = recs[j]["x_minus"] @ m + nn
        out[:, bad] = np.inf
        return out

    def solution(self, z, resid):
        res, bad = self.run(np.asarray(z, dtype=float)[:, None])
        if res is None or bad[0]:
            raise BlowUpError(float("nan"), "Riccati sweep")
        paths, segments, switches, records = [], [], [], []
        for i, st in enumerate(res["stages"]):
            n = self.data[i].n
            path = _path(*st[:5], 0, n)
            _warn_cond(path.cond)
            paths.append(path)
            X, D0, D1 = (v[:, 0].T for v in res["fw"][i])
            lam = np.einsum("kij,jk->ik", path.K, X) + path.s.T
            U = self._controls(i, path.t, lam)
            segments.append(Segment(self.qs[i], path.t.copy(), np.ascontiguousarray(X), np.ascontiguousarray(D0),
                                    np.ascontiguousarray(D1), U[:, :-1], U[:, 1:]))
        for j, rc in enumerate(res["recs"]):
            t = float(res["T"][j + 1, 0])
            p = float(res["ps"][j, 0])
            records.append(dict(t=t, p=p, sigma=self.events[j], K_plus=rc["K_plus"][0], s_plus=rc["s_plus"][0],
                                K_minus=rc["K_minus"][0], s_minus=rc["s_minus"][0]))
            switches.append(SwitchRecord(t, self.kinds[j], self.events[j], self.qs[j], self.qs[j + 1],
                                         rc["x_minus"][0].copy(), rc["x_plus"][0].copy()))
        traj = HybridTrajectory(segments, switches)
        return RiccatiSolution(paths, self.qs, records, traj, self.sys, self.cost, resid)

    def _controls(self, i, t, lam):
        loc = self.sys.locations[self.qs[i]]
        Rq = self.cost.R[self.qs[i]]
        cols = []
        for k, tk in enumerate(t):
            B, R = _mat(loc.B, tk), _mat(Rq, tk)
            cols.append(-cho_solve(cho_factor(R), B.T @ lam[:, k]))
        return np.stack(cols, axis=1)


def solve_tracking(sys: LqHybridSystem, cost: LqCost, q0: str, events, x0, span, guess=(), p_guess=None,
                   kinds=None, cfg: IntegratorConfig = IntegratorConfig(), tol: float = 1e-10,
                   max_iter: int = 100) -> RiccatiSolution:
    """Riccati solution of the LQ hybrid tracking problem for a fixed event sequence.

    Switching times (and ``p`` of autonomous switches) are found by the
    shared damped Newton iteration on the minimised-Hamiltonian gaps and
    the surface conditions.
    """
    tr = _Tracker(sys, cost, q0, events, kinds, x0, span, cfg)
    if len(guess) != tr.L:
        raise ValueError(f"need {tr.L} switching-time guesses")
    pg = list(p_guess) if p_guess is not None else [0.0] * len(tr.aut)
    z0 = np.array(list(guess) + pg, dtype=float)
    resid = 0.0
    if z0.size:
        res = newton(tr.residual, z0, tol=tol, max_iter=max_iter)
        z0, resid = res.z, res.residual_norm
    return tr.solution(z0, resid)


def multistart_roots(sys, cost, q0, events, x0, span, guesses, p_guesses=None, kinds=None,
                     cfg: IntegratorConfig = IntegratorConfig(), tol: float = 1e-10, merge: float = 1e-6):
    """Run :func:`solve_tracking` from several guesses and collect distinct roots.

    Returns ``(roots, multiple)`` where ``roots`` is a list of
    ``(times, p_values, cost)`` and ``multiple`` flags more than one root.
    """
    roots = []
    for k, g in enumerate(guesses):
        pg = None if p_guesses is None else p_guesses[k]
        try:
            sol = solve_tracking(sys, cost, q0, events, x0, span, g, pg, kinds, cfg, tol)
        except (NewtonError, ValueError, BlowUpError):
            continue
        times = tuple(rec["t"] for rec in sol.switch_records)
        ps = tuple(rec["p"] for rec in sol.switch_records)
        if not any(np.max(np.abs(np.subtract(times, r[0])), initial=0.0) <= merge for r in roots):
            roots.append((times, ps, sol.cost_value()))
    return roots, len(roots) > 1


def switch_condition_residual(sol: RiccatiSolution, j: int) -> float:
    """Mismatch of the adjoint jump relation at switch ``j`` along the solution."""
    rec = sol.switch_records[j]
    sw = sol.trajectory.switches[j]
    qj, qn = sol.locations[j], sol.locations[j + 1]
    n = len(sw.x_minus)
    P, J = sol.sys.jump(rec["sigma"], n)
    C, d = sol.cost.C_of(rec["sigma"], n), sol.cost.d_of(rec["sigma"], n)
    m = sol.sys.surface(qj, qn)[0] if (qj, qn) in sol.sys.manifolds else np.zeros(n)
    lam_minus = rec["K_minus"] @ sw.x_minus + rec["s_minus"]
    lam_plus = rec["K_plus"] @ sw.x_plus + rec["s_plus"]
    rhs = P.T @ lam_plus + rec["p"] * m + C @ (sw.x_minus - d)
    return float(np.max(np.abs(lam_minus - rhs)))


@dataclass(frozen=True)
class LqProblem:
    sys: LqHybridSystem
    cost: LqCost
    q0: str
    x0: np.ndarray
    span: tuple
    events: tuple = ()
    guess: tuple = ()
    p_guess: tuple = ()
    name: str = "lq"

    def solve(self, cfg: IntegratorConfig = IntegratorConfig(), **kw) -> RiccatiSolution:
        return solve_tracking(self.sys, self.cost, self.q0, self.events, self.x0, self.span, self.guess,
                              list(self.p_guess) if self.p_guess else None, cfg=cfg, **kw)

    def to_problem(self) -> HybridProblem:
        """The same problem in general form, with the closed-form minimiser ``-R^{-1} B^T lam``."""
        hs = self.sys.to_hybrid()
        dims = dict(hs.state_dims)
        mins = {}
        for q, loc in self.sys.locations.items():
            B, R = _mat(loc.B, 0.0), _mat(self.cost.R[q], 0.0)
            M = -np.linalg.solve(R, B.T)
            mins[q] = (lambda M: lambda x, lam: _lin(M, lam))(M)
        return HybridProblem(hs, self.cost.to_cost(dims), self.q0, self.x0, self.span[0], self.span[1],
                             self.events, (), mins, self.guess, self.p_guess, name=self.name)


def tanh_instance(tf: float = 1.0, x0: float = 1.0, r: float = 0.0) -> LqProblem:
    """Scalar ``x' = u`` with ``L = R = 1``: ``K(t) = tanh(tf - t)``."""
    sys = LqHybridSystem({"q1": LqLocation(0.0, 1.0)})
    cost = LqCost(L={"q1": 1.0}, R={"q1": 1.0}, G=0.0, r={"q1": r} if r else {})
    return LqProblem(sys, cost, "q1", np.array([x0]), (0.0, tf), name="tanh")


def oscillator_instance(v_ref: float = 1.0, tf: float = 4.0, x0=(0.0, 1.0), ts_guess: float = 0.8,
                        p_guess: float = 0.0) -> LqProblem:
    """Oscillator switching to a double integrator on ``x2 = 0`` (LQ form)."""
    sys = LqHybridSystem(
        {"q1": LqLocation([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]]),
         "q2": LqLocation([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])},
        automaton={("q1", "s12"): "q2"},
        manifolds={("q1", "q2"): ([0.0, 1.0], 0.0)},
    )
    zero = np.zeros((2, 2))
    cost = LqCost(L={"q1": zero, "q2": zero}, R={"q1": 1.0, "q2": 1.0}, G=np.diag([0.0, 1.0]),
                  C={"s12": np.diag([1.0, 0.0])}, d={"s12": [0.0, 0.0]}, dT=[0.0, v_ref])
    return LqProblem(sys, cost, "q1", np.asarray(x0, dtype=float), (0.0, tf), ("s12",), (ts_guess,), (p_guess,),
                     name="lq")
