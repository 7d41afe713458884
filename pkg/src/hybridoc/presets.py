"""Built-in problems: the scalar flip example, the oscillator / double integrator
example and a linear-quadratic tracking instance.

Preset scalars (initial states, horizons, control boxes) are not fixed by
the underlying problem statements; the values here were chosen for
well-conditioned runs and are written to every run manifest.
"""
from __future__ import annotations

import numpy as np

from .core import (
    AUTONOMOUS,
    CONTROLLED,
    Box,
    HybridProblem,
    CostSpec,
    HybridSystem,
    JumpMap,
    Manifold,
    SwitchCost,
)


def _half_u2(x, u):
    return 0.5 * u[0] ** 2


def _half_u2_grad_x(x, u):
    return np.zeros_like(x)


def _half_u2_grad_u(x, u):
    return np.array(u, dtype=float)


def example1(x0=1.0, tf=1.0, umax=4.0, ts_guess=0.5) -> HybridProblem:
    """Scalar system with sign-flip jump at a controlled switch.

    ``x' = x + x u`` in q1, ``x' = -x + x u`` in q2, ``xi(x) = -x``;
    cost ``int u^2/2 + 1/(1 + x(ts-)^2) + x(tf)^2/2``.
    """
    box = Box([-umax], [umax])
    sys = HybridSystem(
        state_dims={"q1": 1, "q2": 1},
        vector_fields={
            "q1": lambda x, u: x * (1.0 + u),
            "q2": lambda x, u: x * (u - 1.0),
        },
        control_sets={"q1": box, "q2": box},
        automaton={("q1", "s12"): "q2"},
        jump_maps={"s12": JumpMap(lambda x: -x, lambda x: np.array([[-1.0]]))},
        field_jacobians={
            "q1": lambda x, u: (1.0 + u)[None],
            "q2": lambda x, u: (u - 1.0)[None],
        },
        control_jacobians={"q1": lambda x, u: x[None], "q2": lambda x, u: x[None]},
    )
    cost = CostSpec(
        running={"q1": _half_u2, "q2": _half_u2},
        running_grad={"q1": _half_u2_grad_x, "q2": _half_u2_grad_x},
        running_grad_u={"q1": _half_u2_grad_u, "q2": _half_u2_grad_u},
        switching={"s12": SwitchCost(lambda x: 1.0 / (1.0 + x[0] ** 2),
                                     lambda x: np.array([-2.0 * x[0] / (1.0 + x[0] ** 2) ** 2]))},
        terminal=lambda x: 0.5 * x[0] ** 2,
        terminal_grad=lambda x: np.array([x[0]]),
    )
    u_opt = lambda x, lam: -(lam * x)
    return HybridProblem(
        name="example1", sys=sys, cost=cost, q0="q1", x0=np.array([float(x0)]), t0=0.0, tf=float(tf),
        events=("s12",), kinds=(CONTROLLED,), minimizers={"q1": u_opt, "q2": u_opt},
        switch_guess=(ts_guess,), params={"x0": float(x0), "tf": float(tf), "umax": umax},
    )


def example2(x0=(0.0, 1.0), v_ref=1.0, tf=4.0, umax=4.0, ts_guess=0.8, p_guess=0.0) -> HybridProblem:
    """Oscillator that becomes a double integrator when ``x2`` crosses zero.

    q1: ``(x2, -x1 + u)``; q2: ``(x2, u)``; manifold ``m(x) = x2``; identity
    jump; cost ``int u^2/2 + x1(ts-)^2/2 + (x2(tf) - v_ref)^2/2``.
    """
    box = Box([-umax], [umax])
    sys = HybridSystem(
        state_dims={"q1": 2, "q2": 2},
        vector_fields={
            "q1": lambda x, u: np.array([x[1], u[0] - x[0]]),
            "q2": lambda x, u: np.array([x[1], u[0] + 0.0 * x[0]]),
        },
        control_sets={"q1": box, "q2": box},
        automaton={("q1", "s12"): "q2"},
        manifolds={("q1", "q2"): Manifold(lambda x: x[1], lambda x: np.array([0.0, 1.0]))},
        field_jacobians={
            "q1": lambda x, u: np.array([[0.0, 1.0], [-1.0, 0.0]]),
            "q2": lambda x, u: np.array([[0.0, 1.0], [0.0, 0.0]]),
        },
        control_jacobians={
            "q1": lambda x, u: np.array([[0.0], [1.0]]),
            "q2": lambda x, u: np.array([[0.0], [1.0]]),
        },
    )
    cost = CostSpec(
        running={"q1": _half_u2, "q2": _half_u2},
        running_grad={"q1": _half_u2_grad_x, "q2": _half_u2_grad_x},
        running_grad_u={"q1": _half_u2_grad_u, "q2": _half_u2_grad_u},
        switching={"s12": SwitchCost(lambda x: 0.5 * x[0] ** 2, lambda x: np.array([x[0], 0.0]))},
        terminal=lambda x: 0.5 * (x[1] - v_ref) ** 2,
        terminal_grad=lambda x: np.array([0.0, x[1] - v_ref]),
    )
    u_opt = lambda x, lam: -lam[1:2]
    return HybridProblem(
        name="example2", sys=sys, cost=cost, q0="q1", x0=np.asarray(x0, dtype=float), t0=0.0, tf=float(tf),
        events=("s12",), kinds=(AUTONOMOUS,), minimizers={"q1": u_opt, "q2": u_opt},
        switch_guess=(ts_guess,), p_guess=(p_guess,),
        params={"x0": list(map(float, x0)), "v_ref": float(v_ref), "tf": float(tf), "umax": umax},
    )


PRESETS = {"example1": example1, "example2": example2}


# Per-stage grid boxes (lower, upper) and default (dx, dt) for the value
# grids.  The boxes contain the optimal trajectories from the default
# initial states with a margin of several cells.
GRID_DEFAULTS = {
    "example1": {"boxes": [((0.2,), (2.5,)), ((-2.5,), (-0.1,))], "dx": 1e-2, "dt": 1e-3},
    "example2": {"boxes": [((-0.5, -0.5), (1.0, 1.25)), ((-0.5, -0.5), (2.25, 1.25))], "dx": 2.5e-2, "dt": 2.5e-3},
}
GRID_DEFAULTS["lq"] = GRID_DEFAULTS["example2"]
