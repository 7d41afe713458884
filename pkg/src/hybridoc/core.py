"""Hybrid system structure, hybrid inputs, trajectories and cost data.

Array conventions used throughout the package: a continuous state is an
array whose first axis indexes state components, ``x.shape == (n,)`` for a
single state or ``(n, *batch)`` for a batch.  Controls follow the same rule
with ``m`` components.  Vector fields, running costs and feedback laws are
called with batched arrays by the integrators and grid solvers, so they
should be written with broadcasting in mind (``np.zeros_like(x[0])``
instead of a bare ``0`` inside an ``np.array([...])``).  Jump maps,
manifolds, switching and terminal costs are only ever called on single
states.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import qmc

IDENTITY = "id"
AUTONOMOUS = "autonomous"
CONTROLLED = "controlled"


class HybridError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(HybridError, ValueError):
    pass


class TransitionError(HybridError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ControlBoundsError(HybridError, ValueError):
    pass


def fd_step(x: np.ndarray) -> np.ndarray:
    return 1e-6 * np.maximum(1.0, np.abs(x))


def numerical_jacobian(fn: Callable, x: np.ndarray, *args) -> np.ndarray:
    """Central-difference derivative of ``fn(x, *args)`` with respect to ``x``.

    Works on single and batched states.  For vector valued ``fn`` returning
    ``(k, *batch)`` the result is ``(k, n, *batch)``; for scalar valued ``fn``
    it is the gradient ``(n, *batch)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    cols = []
    for j in range(n):
        d = fd_step(x[j])
        xp = x.copy()
        xm = x.copy()
        xp[j] = x[j] + d
        xm[j] = x[j] - d
        fp = np.asarray(fn(xp, *args), dtype=float)
        fm = np.asarray(fn(xm, *args), dtype=float)
        cols.append((fp - fm) / (2.0 * d))
    out = np.stack(cols, axis=0)
    batch_ndim = x.ndim - 1
    if out.ndim - 1 > batch_ndim:
        # vector valued: move the derivative axis behind the output axis
        out = np.moveaxis(out, 0, 1)
    return out


def as_batch(value, shape: tuple, batch: tuple) -> np.ndarray:
    """Broadcast ``value`` (possibly constant, possibly scalar) to ``shape + batch``."""
    arr = np.asarray(value, dtype=float)
    target = tuple(shape) + tuple(batch)
    if arr.shape == target:
        return arr
    out = np.empty(target)
    if arr.shape == tuple(shape):
        out[...] = arr.reshape(arr.shape + (1,) * len(batch))
    else:
        out[...] = arr
    return out


@dataclass(frozen=True)
class Box:
    """Axis aligned control set ``lower <= u <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionError("control box bounds differ in shape")
        if np.any(lo > hi):
            raise ValueError(f"control box has lower > upper: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def _b(self, arr, u):
        return arr.reshape(arr.shape + (1,) * (np.ndim(u) - 1))

    def project(self, u: np.ndarray) -> np.ndarray:
        if np.ndim(u) == 2:
            return np.minimum(np.maximum(u, self.lower[:, None]), self.upper[:, None])
        return np.clip(u, self._b(self.lower, u), self._b(self.upper, u))

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self._b(self.lower, u) - tol) and np.all(u <= self._b(self.upper, u) + tol))


@dataclass(frozen=True)
class JumpMap:
    """Continuous state reset ``x' = fn(x)`` with Jacobian ``(n', n)``."""

    fn: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return np.asarray(self.fn(x), dtype=float)

    def jac(self, x):
        if self.jacobian is not None:
            return np.atleast_2d(np.asarray(self.jacobian(x), dtype=float))
        return np.atleast_2d(numerical_jacobian(self.fn, x))


@dataclass(frozen=True)
class Manifold:
    """Switching surface ``fn(x) = 0`` with gradient ``grad(x)``."""

    fn: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.fn(x)

    def gradient(self, x):
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        return numerical_jacobian(self.fn, np.asarray(x, dtype=float))


def identity_jump(x):
    return np.array(x, dtype=float, copy=True)


@dataclass(frozen=True)
class HybridSystem:
    """Discrete locations, their vector fields and the transition structure.

    Attributes:
        state_dims: location -> continuous state dimension.
        vector_fields: location -> ``f(x, u)``.
        control_sets: location -> :class:`Box`.
        automaton: ``(location, event) -> location``.
        jump_maps: event -> :class:`JumpMap`; events without an entry reset
            the state by the identity.
        manifolds: ``(from, to)`` -> :class:`Manifold` for autonomous switches.
        field_jacobians: location -> ``df/dx(x, u)``; finite differences otherwise.
        control_jacobians: location -> ``df/du(x, u)``; finite differences otherwise.
    """

    state_dims: Mapping[str, int]
    vector_fields: Mapping[str, Callable]
    control_sets: Mapping[str, Box]
    automaton: Mapping[tuple, str] = field(default_factory=dict)
    jump_maps: Mapping[str, JumpMap] = field(default_factory=dict)
    manifolds: Mapping[tuple, Manifold] = field(default_factory=dict)
    field_jacobians: Mapping[str, Callable] = field(default_factory=dict)
    control_jacobians: Mapping[str, Callable] = field(default_factory=dict)

    def __post_init__(self):
        qs = set(self.state_dims)
        if not qs:
            raise ValueError("a hybrid system needs at least one discrete state")
        for name in ("vector_fields", "control_sets"):
            missing = qs - set(getattr(self, name))
            if missing:
                raise ValueError(f"{name} missing entries for {sorted(missing)}")
        for (q, sigma), r in self.automaton.items():
            if q not in qs or r not in qs:
                raise ValueError(f"automaton entry ({q}, {sigma}) -> {r} uses unknown states")
        events_in_automaton = {s for (_, s) in self.automaton}
        for sigma in self.jump_maps:
            if sigma not in events_in_automaton:
                raise ValueError(f"jump map for event {sigma!r} has no automaton entry")
        for (p, r) in self.manifolds:
            if p not in qs or r not in qs:
                raise ValueError(f"manifold ({p}, {r}) uses unknown states")
            self.autonomous_event(p, r)

    @property
    def discrete_states(self) -> tuple:
        return tuple(self.state_dims)

    @property
    def events(self) -> frozenset:
        return frozenset({IDENTITY} | {s for (_, s) in self.automaton})

    def control_dim(self, q: str) -> int:
        return self.control_sets[q].dim

    def transition(self, q: str, sigma: str) -> str:
        if sigma == IDENTITY:
            return q
        try:
            return self.automaton[(q, sigma)]
        except KeyError:
            raise TransitionError(f"transition not defined for ({q}, {sigma})") from None

    def autonomous_event(self, p: str, r: str) -> str:
        """Event label of the autonomous transition ``p -> r``."""
        found = [s for (q, s), t in self.automaton.items() if q == p and t == r]
        if len(found) != 1:
            raise TransitionError(
                f"manifold ({p}, {r}) needs exactly one automaton event p -> r, found {found}"
            )
        return found[0]

    def jump_map(self, sigma: str) -> JumpMap:
        return self.jump_maps.get(sigma, JumpMap(identity_jump, None))

    def field(self, q, x, u):
        return np.asarray(self.vector_fields[q](x, u), dtype=float)

    def jacobian_x(self, q, x, u, broadcast=True):
        """``df_q/dx`` with shape ``(n, n, *batch)``.

        With ``broadcast=False`` a supplied Jacobian that does not depend on
        the batch may come back as a plain ``(n, n)`` matrix.
        """
        n = self.state_dims[q]
        batch = np.shape(x)[1:]
        jac = self.field_jacobians.get(q)
        if jac is not None:
            if not broadcast:
                return np.asarray(jac(x, u), dtype=float)
            return as_batch(jac(x, u), (n, n), batch)
        return numerical_jacobian(lambda xx: self.vector_fields[q](xx, u), x)

    def jacobian_u(self, q, x, u):
        """``df_q/du`` with shape ``(n, m, *batch)``."""
        n = self.state_dims[q]
        m = self.control_dim(q)
        batch = np.shape(x)[1:]
        jac = self.control_jacobians.get(q)
        if jac is not None:
            return as_batch(jac(x, u), (n, m), batch)
        return numerical_jacobian(lambda uu: self.vector_fields[q](x, uu), np.asarray(u, dtype=float))

    def manifolds_from(self, q: str) -> list:
        return [(r, m) for (p, r), m in self.manifolds.items() if p == q]


def _check_dim(sys: HybridSystem, q: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if q not in sys.state_dims:
        raise TransitionError(f"unknown discrete state {q!r}")
    if x.shape[0] != sys.state_dims[q]:
        raise DimensionError(f"state has dimension {x.shape[0]}, location {q} needs {sys.state_dims[q]}")
    return x


def jump(sys: HybridSystem, sigma: str, q: str, x) -> tuple:
    """Apply event ``sigma`` in location ``q``: returns ``(q', xi_sigma(x))``."""
    x = _check_dim(sys, q, x)
    r = sys.transition(q, sigma)
    if sigma == IDENTITY:
        return r, x.copy()
    xr = sys.jump_map(sigma)(x)
    if xr.shape[0] != sys.state_dims[r]:
        raise DimensionError(f"jump {sigma} produced dimension {xr.shape[0]}, {r} needs {sys.state_dims[r]}")
    return r, xr


def manifold_value(sys: HybridSystem, q: str, r: str, x) -> float:
    try:
        m = sys.manifolds[(q, r)]
    except KeyError:
        raise TransitionError(f"no autonomous transition {q} -> {r}") from None
    return float(m(_check_dim(sys, q, x)))


@dataclass(frozen=True)
class SwitchCost:
    fn: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def gradient(self, x):
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        return numerical_jacobian(self.fn, np.asarray(x, dtype=float))


def _zero(*_):
    return 0.0


@dataclass(frozen=True)
class CostSpec:
    """Running costs ``l_q(x, u)``, switching costs ``c_sigma(x)``, terminal ``g(x)``.

    Missing running/switching entries mean zero cost.  Gradients fall back to
    central differences.
    """

    running: Mapping[str, Callable] = field(default_factory=dict)
    running_grad: Mapping[str, Callable] = field(default_factory=dict)
    running_grad_u: Mapping[str, Callable] = field(default_factory=dict)
    switching: Mapping[str, SwitchCost] = field(default_factory=dict)
    terminal: Callable = _zero
    terminal_grad: Optional[Callable] = None

    def running_cost(self, q, x, u):
        fn = self.running.get(q)
        batch = np.shape(x)[1:]
        if fn is None:
            return np.zeros(batch) if batch else 0.0
        val = np.asarray(fn(x, u), dtype=float)
        return np.broadcast_to(val, batch) if batch else float(val)

    def running_grad_x(self, q, x, u):
        n = np.shape(x)[0]
        batch = np.shape(x)[1:]
        fn = self.running.get(q)
        if fn is None:
            return np.zeros((n,) + batch)
        g = self.running_grad.get(q)
        if g is not None:
            return as_batch(g(x, u), (n,), batch)
        return numerical_jacobian(lambda xx: fn(xx, u), x)

    def running_grad_control(self, q, x, u):
        m = np.shape(u)[0]
        batch = np.shape(x)[1:]
        fn = self.running.get(q)
        if fn is None:
            return np.zeros((m,) + batch)
        g = self.running_grad_u.get(q)
        if g is not None:
            return as_batch(g(x, u), (m,), batch)
        return numerical_jacobian(lambda uu: fn(x, uu), np.asarray(u, dtype=float))

    def switch_cost(self, sigma, x) -> float:
        c = self.switching.get(sigma)
        return 0.0 if c is None else float(c.fn(x))

    def switch_grad(self, sigma, x) -> np.ndarray:
        c = self.switching.get(sigma)
        if c is None:
            return np.zeros(np.shape(x)[0])
        return c.gradient(x)

    def terminal_cost(self, x) -> float:
        return float(self.terminal(x))

    def terminal_gradient(self, x) -> np.ndarray:
        if self.terminal_grad is not None:
            return np.asarray(self.terminal_grad(x), dtype=float)
        return numerical_jacobian(self.terminal, np.asarray(x, dtype=float))


@dataclass(frozen=True)
class HybridInput:
    """Controlled switching schedule plus continuous control.

    ``control(t, q, x)`` may ignore ``x`` (open loop) or use it (feedback).
    ``breakpoints`` are instants where the control is discontinuous; the
    integrators place a knot on each of them.  Step functions built by
    :meth:`piecewise_constant` are right continuous.
    """

    control: Callable
    schedule: tuple = ()
    breakpoints: tuple = ()

    def __post_init__(self):
        sched = tuple((float(t), str(s)) for t, s in self.schedule)
        times = [t for t, _ in sched]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "breakpoints", tuple(sorted(float(b) for b in self.breakpoints)))

    @classmethod
    def constant(cls, value, schedule=()):
        value = np.atleast_1d(np.asarray(value, dtype=float))

        col = value.reshape(value.shape + (1,))

        def control(t, q, x):
            batch = np.shape(x)[1:]
            if len(batch) == 1:
                out = np.empty(value.shape + batch)
                out[...] = col
                return out
            return as_batch(value, value.shape, batch).copy()

        return cls(control, schedule)

    @classmethod
    def open_loop(cls, fn: Callable, schedule=(), breakpoints=()):
        """Wrap ``fn(t) -> u``."""

        def control(t, q, x):
            u = np.atleast_1d(np.asarray(fn(t), dtype=float))
            return as_batch(u, u.shape[:1], np.shape(x)[1:]).copy()

        return cls(control, schedule, breakpoints)

    @classmethod
    def piecewise_constant(cls, times: Sequence[float], values, schedule=()):
        """Control equal to ``values[i]`` on ``[times[i], times[i+1])``."""
        times = np.asarray(times, dtype=float)
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]

        def control(t, q, x):
            i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(vals) - 1)
            u = vals[i].T
            return as_batch(u, u.shape[:1], np.shape(x)[1:]).copy() if np.ndim(t) == 0 else u

        return cls(control, schedule, tuple(times[1:]))

    def switch_times(self) -> tuple:
        return tuple(t for t, _ in self.schedule)


@dataclass(frozen=True)
class SwitchRecord:
    t: float
    kind: str
    sigma: str
    q_from: str
    q_to: str
    x_minus: np.ndarray
    x_plus: np.ndarray


@dataclass
class Segment:
    """RK4 knots of one location with cubic Hermite dense output.

    ``d0[:, k]`` and ``d1[:, k]`` are the first and last RK4 stage slopes of
    the step ``t[k] -> t[k+1]``; ``u0``/``u1`` are the controls applied at the
    start (right limit) and end (left limit) of that step.
    """

    q: Optional[str]
    t: np.ndarray
    x: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    u0: np.ndarray
    u1: np.ndarray

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    def __call__(self, t):
        """Dense state at time(s) ``t``; returns ``(n,)`` or ``(n, len(t))``."""
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        if len(self.t) == 1:
            out = np.repeat(self.x[:, :1], len(tt), axis=1)
            return out[:, 0] if scalar else out
        k = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[k + 1] - self.t[k]
        s = (tt - self.t[k]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        out = h00 * self.x[:, k] + h10 * h * self.d0[:, k] + h01 * self.x[:, k + 1] + h11 * h * self.d1[:, k]
        return out[:, 0] if scalar else out

    def midpoints(self):
        """Times and Hermite states at the interval midpoints."""
        h = np.diff(self.t)
        tm = self.t[:-1] + 0.5 * h
        xm = 0.5 * (self.x[:, :-1] + self.x[:, 1:]) + h * (self.d0 - self.d1) / 8.0
        return tm, xm


@dataclass
class HybridTrajectory:
    segments: list
    switches: list

    @property
    def switch_times(self) -> tuple:
        return (self.segments[0].t_start,) + tuple(s.t for s in self.switches)

    @property
    def discrete_path(self) -> tuple:
        return tuple(s.q for s in self.segments)

    @property
    def t0(self) -> float:
        return self.segments[0].t_start

    @property
    def tf(self) -> float:
        return self.segments[-1].t_end

    @property
    def final_state(self) -> np.ndarray:
        return self.segments[-1].x[:, -1].copy()

    def segment_index(self, t: float, side: str = "right") -> int:
        times = [s.t for s in self.switches]
        return int(np.searchsorted(times, t, side=side))

    def state(self, t: float, side: str = "right") -> np.ndarray:
        """State at ``t``; at a switch instant ``side='left'`` gives ``x(t-)``."""
        return self.segments[self.segment_index(t, side)](t)


def validate_system(
    sys: HybridSystem,
    x0,
    q0: str,
    cost: Optional[CostSpec] = None,
    box: Optional[Mapping[str, tuple]] = None,
    samples: int = 10_000,
    seed: int = 0,
) -> "ValidationReport":
    """Sample based check of the standing assumptions.

    Args:
        box: location -> ``(lower, upper)`` sampling box; defaults to the
            cube of half width 2 around ``x0`` (or the origin when the
            dimension differs).
        samples: number of scrambled Sobol points per location.
    """
    x0 = _check_dim(sys, q0, x0)
    violations = []
    for (p, r), m in sys.manifolds.items():
        if p == q0 and abs(float(m(x0))) <= 1e-12:
            violations.append(f"A1: initial state lies on manifold ({p}, {r})")

    lipschitz = {}
    rng = np.random.default_rng(seed)
    for q in sys.discrete_states:
        n = sys.state_dims[q]
        if box is not None and q in box:
            lo, hi = (np.asarray(b, dtype=float) for b in box[q])
        else:
            c = x0 if n == len(x0) else np.zeros(n)
            lo, hi = c - 2.0, c + 2.0
        ubox = sys.control_sets[q]
        mq = ubox.dim
        sob = qmc.Sobol(d=n + mq, scramble=True, seed=seed)
        pts = sob.random(samples)
        X = (lo[:, None] + (hi - lo)[:, None] * pts[:, :n].T)
        U = (ubox.lower[:, None] + (ubox.upper - ubox.lower)[:, None] * pts[:, n:].T)

        # local slope along short random displacements
        scale = 1e-3 * max(float(np.max(hi - lo)), 1e-12)
        dX = rng.normal(size=X.shape) * scale
        dU = rng.normal(size=U.shape) * scale * (ubox.upper - ubox.lower > 0)[:, None]
        f1 = np.asarray(sys.field(q, X, U)).reshape(n, -1)
        f2 = np.asarray(sys.field(q, X + dX, U + dU)).reshape(n, -1)
        den = np.linalg.norm(dX, axis=0) + np.linalg.norm(dU, axis=0)
        ratio = np.linalg.norm(f2 - f1, axis=0) / den
        if not np.all(np.isfinite(f1)):
            violations.append(f"A0: vector field of {q} is not finite on the sampling box")
        lipschitz[q] = float(np.max(ratio[np.isfinite(ratio)])) if np.any(np.isfinite(ratio)) else float("inf")

        outgoing = sys.manifolds_from(q)
        spacing = float(np.max(hi - lo)) / samples ** (1.0 / n)
        for i in range(len(outgoing)):
            for j in range(i + 1, len(outgoing)):
                (r1, m1), (r2, m2) = outgoing[i], outgoing[j]
                v1 = np.array([m1(X[:, k]) for k in range(samples)])
                v2 = np.array([m2(X[:, k]) for k in range(samples)])
                g1 = np.linalg.norm(m1.gradient(X[:, 0])) * spacing
                g2 = np.linalg.norm(m2.gradient(X[:, 0])) * spacing
                if np.any((np.abs(v1) <= g1) & (np.abs(v2) <= g2)):
                    violations.append(f"A0: manifolds ({q}, {r1}) and ({q}, {r2}) intersect near sampled points")

        if cost is not None:
            lv = np.asarray(cost.running_cost(q, X, U))
            if not np.all(np.isfinite(lv)) or np.any(lv < 0):
                violations.append(f"A2: running cost of {q} negative or non-finite on samples")
            sub = X[:, :: max(1, samples // 500)]
            for (qq, sigma), _ in sys.automaton.items():
                if qq != q:
                    continue
                cv = np.array([cost.switch_cost(sigma, sub[:, k]) for k in range(sub.shape[1])])
                if not np.all(np.isfinite(cv)) or np.any(cv < 0):
                    violations.append(f"A2: switching cost of {sigma} negative or non-finite on samples")
            if n == len(x0):
                gv = np.array([cost.terminal_cost(sub[:, k]) for k in range(sub.shape[1])])
                if not np.all(np.isfinite(gv)) or np.any(gv < 0):
                    violations.append(f"A2: terminal cost negative or non-finite on samples of {q}")
    return ValidationReport(violations=violations, lipschitz=lipschitz)


@dataclass(frozen=True)
class ValidationReport:
    violations: list
    lipschitz: dict

    @property
    def accepted(self) -> bool:
        return not self.violations


def to_mayer(sys: HybridSystem, cost: CostSpec) -> tuple:
    """Fold running and switching costs into a leading accumulator state ``z``.

    The returned system has states ``(z, x)``; its cost is terminal only,
    ``z + g(x)``.  Start it from ``augment_state(x0)``.
    """

    def aug_field(q):
        f = sys.vector_fields[q]

        def fhat(xh, u):
            x = xh[1:]
            lz = np.asarray(cost.running_cost(q, x, u), dtype=float)
            fx = np.asarray(f(x, u), dtype=float)
            return np.concatenate([lz.reshape((1,) + fx.shape[1:]), fx], axis=0)

        return fhat

    def aug_jac(q):
        def jac(xh, u):
            x = xh[1:]
            n = x.shape[0]
            batch = x.shape[1:]
            out = np.zeros((n + 1, n + 1) + batch)
            out[0, 1:] = cost.running_grad_x(q, x, u)
            out[1:, 1:] = sys.jacobian_x(q, x, u)
            return out

        return jac

    def aug_ujac(q):
        def jac(xh, u):
            x = xh[1:]
            top = cost.running_grad_control(q, x, u)
            return np.concatenate([top[None], sys.jacobian_u(q, x, u)], axis=0)

        return jac

    def aug_jump(sigma):
        jm = sys.jump_map(sigma)

        def fn(xh):
            return np.concatenate([[xh[0] + cost.switch_cost(sigma, xh[1:])], jm(xh[1:])])

        def jac(xh):
            inner = jm.jac(xh[1:])
            out = np.zeros((inner.shape[0] + 1, inner.shape[1] + 1))
            out[0, 0] = 1.0
            out[0, 1:] = cost.switch_grad(sigma, xh[1:])
            out[1:, 1:] = inner
            return out

        return JumpMap(fn, jac)

    def aug_manifold(m):
        return Manifold(lambda xh: m(xh[1:]), lambda xh: np.concatenate([[0.0], m.gradient(xh[1:])]))

    events = {s for (_, s) in sys.automaton}
    hat = HybridSystem(
        state_dims={q: n + 1 for q, n in sys.state_dims.items()},
        vector_fields={q: aug_field(q) for q in sys.discrete_states},
        control_sets=dict(sys.control_sets),
        automaton=dict(sys.automaton),
        jump_maps={s: aug_jump(s) for s in events},
        manifolds={k: aug_manifold(m) for k, m in sys.manifolds.items()},
        field_jacobians={q: aug_jac(q) for q in sys.discrete_states},
        control_jacobians={q: aug_ujac(q) for q in sys.discrete_states},
    )

    def ghat(xh):
        return float(xh[0]) + cost.terminal_cost(xh[1:])

    def ghat_grad(xh):
        return np.concatenate([[1.0], cost.terminal_gradient(xh[1:])])

    return hat, CostSpec(terminal=ghat, terminal_grad=ghat_grad)


@dataclass(frozen=True)
class HybridProblem:
    """Optimal control problem with a fixed location sequence.

    ``events[j]`` and ``kinds[j]`` describe switch ``j``; autonomous switches
    need a manifold between the two locations.  ``minimizers`` optionally
    give the Hamiltonian minimizer ``u(x, lam)`` of a location in closed
    form (it is projected onto the control box).
    """

    sys: HybridSystem
    cost: CostSpec
    q0: str
    x0: np.ndarray
    t0: float
    tf: float
    events: tuple = ()
    kinds: tuple = ()
    minimizers: Mapping[str, Callable] = field(default_factory=dict)
    switch_guess: tuple = ()
    p_guess: tuple = ()
    name: str = "problem"
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", _check_dim(self.sys, self.q0, self.x0).copy())
        object.__setattr__(self, "events", tuple(self.events))
        kinds = tuple(self.kinds) if self.kinds else tuple(
            AUTONOMOUS if self._has_manifold(j) else CONTROLLED for j in range(len(self.events)))
        object.__setattr__(self, "kinds", kinds)
        if len(kinds) != len(self.events):
            raise ValueError("one switch kind per event is required")
        if not self.tf > self.t0:
            raise ValueError("horizon must satisfy t0 < tf")
        qs = self.q_sequence
        for j, kind in enumerate(kinds):
            if kind not in (AUTONOMOUS, CONTROLLED):
                raise ValueError(f"unknown switch kind {kind!r}")
            if kind == AUTONOMOUS:
                if (qs[j], qs[j + 1]) not in self.sys.manifolds:
                    raise ValueError(f"autonomous switch {j} has no manifold ({qs[j]}, {qs[j + 1]})")
                if self.sys.autonomous_event(qs[j], qs[j + 1]) != self.events[j]:
                    raise ValueError(f"event {self.events[j]} does not fire on manifold ({qs[j]}, {qs[j + 1]})")

    def _has_manifold(self, j):
        qs = [self.q0]
        for sigma in self.events:
            qs.append(self.sys.transition(qs[-1], sigma))
        return (qs[j], qs[j + 1]) in self.sys.manifolds

    @property
    def span(self) -> tuple:
        return (self.t0, self.tf)

    @property
    def q_sequence(self) -> tuple:
        qs = [self.q0]
        for sigma in self.events:
            qs.append(self.sys.transition(qs[-1], sigma))
        return tuple(qs)

    @property
    def n_switches(self) -> int:
        return len(self.events)

    def autonomous_indices(self) -> list:
        return [j for j, k in enumerate(self.kinds) if k == AUTONOMOUS]


def augment_state(x0) -> np.ndarray:
    return np.concatenate([[0.0], np.asarray(x0, dtype=float)])
