import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridoc.core import Box, CostSpec, HybridSystem, Segment, manifold_value
from hybridoc.hmp import (
    adjoint_backward,
    adjoint_switch_condition,
    candidate,
    hamiltonian,
    hamiltonian_gap,
    minimize_hamiltonian,
)
from hybridoc.presets import example1, example2


def frozen_segment(q, t, x):
    """Segment holding ``x`` (n,) constant on the knots ``t``."""
    K = len(t)
    n = len(x)
    z = np.zeros((n, K - 1))
    return Segment(q, t, np.repeat(np.asarray(x, float)[:, None], K, axis=1), z, z, np.zeros((1, K - 1)),
                   np.zeros((1, K - 1)))


def test_hamiltonian_example1():
    p = example1()
    H = hamiltonian("q1", np.array([2.0]), np.array([3.0]), np.array([1.0]), p.cost, p.sys)
    assert H == pytest.approx(12.5)


def test_hamiltonian_example2():
    p = example2()
    H = hamiltonian("q2", np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([3.0]), p.cost, p.sys)
    assert H == pytest.approx(2.5)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5))
def test_hamiltonian_zero_adjoint_no_running_cost(u):
    sys = HybridSystem({"q": 1}, {"q": lambda x, u: x * u}, {"q": Box([-5.0], [5.0])})
    H = hamiltonian("q", np.array([1.3]), np.zeros(1), np.array([u]), CostSpec(), sys)
    assert H == 0.0


def test_minimizer_example1_closed_form():
    p = example1()
    wide = Box([-10.0], [10.0])
    sys = HybridSystem(p.sys.state_dims, p.sys.vector_fields, {"q1": wide, "q2": wide}, p.sys.automaton,
                       p.sys.jump_maps)
    u = minimize_hamiltonian("q1", np.array([2.0]), np.array([1.0]), p.cost, sys, p.minimizers["q1"])
    assert u[0] == pytest.approx(-2.0)


def test_minimizer_example2_closed_form():
    p = example2()
    u = minimize_hamiltonian("q2", np.array([0.3, 0.1]), np.array([5.0, 0.7]), p.cost, p.sys, p.minimizers["q2"])
    assert u[0] == pytest.approx(-0.7)


def test_minimizer_projects_to_box():
    p = example1()
    unit = Box([-1.0], [1.0])
    sys = HybridSystem(p.sys.state_dims, p.sys.vector_fields, {"q1": unit, "q2": unit}, p.sys.automaton,
                       p.sys.jump_maps)
    # unconstrained -lam x = 15
    for closed in (p.minimizers["q1"], None):
        u = minimize_hamiltonian("q1", np.array([3.0]), np.array([-5.0]), p.cost, sys, closed)
        assert u[0] == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_golden_section_agrees_with_closed_form(x, lam):
    p = example1()
    a = minimize_hamiltonian("q2", np.array([x]), np.array([lam]), p.cost, p.sys, p.minimizers["q2"])
    b = minimize_hamiltonian("q2", np.array([x]), np.array([lam]), p.cost, p.sys)
    assert a[0] == pytest.approx(b[0], abs=1e-6)


def test_adjoint_constant_for_state_free_field():
    sys = HybridSystem({"q": 2}, {"q": lambda x, u: np.stack([u[0], u[0]]) + 0.0 * x}, {"q": Box([-1.0], [1.0])})
    seg = frozen_segment("q", np.linspace(0.0, 1.0, 11), [0.0, 0.0])
    lam = adjoint_backward(sys, CostSpec(), seg, np.array([1.5, -2.0]))
    assert np.all(lam == np.array([[1.5], [-2.0]]))


def test_adjoint_rotation_example2():
    p = example2()
    te = math.pi / 2
    seg = frozen_segment("q1", np.linspace(0.0, te, 1571), [0.0, 0.0])
    lam = adjoint_backward(p.sys, p.cost, seg, np.array([1.0, 0.0]), p.minimizers["q1"])
    # lam1' = lam2, lam2' = -lam1 gives lam = (cos(t - te), -sin(t - te))
    s = seg.t - te
    assert np.abs(lam - np.stack([np.cos(s), -np.sin(s)])).max() <= 1e-9
    assert np.abs(lam[:, 0] - [0.0, 1.0]).max() <= 1e-9


def test_adjoint_example1_q2_against_fine_integration():
    # frozen x; lam' = lam (lam x + 1) with the closed-form control -lam x
    p = example1()
    xval = 0.4
    seg = frozen_segment("q2", np.linspace(0.5, 1.0, 51), [xval])
    lam = adjoint_backward(p.sys, p.cost, seg, np.array([0.3]), p.minimizers["q2"])
    # independent RK4 oracle with a 10x smaller step
    f = lambda l: -(l * (-l * xval - 1.0))
    l, h = 0.3, -0.001
    for _ in range(500):
        k1 = f(l)
        k2 = f(l + 0.5 * h * k1)
        k3 = f(l + 0.5 * h * k2)
        k4 = f(l + h * k3)
        l += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert lam[0, 0] == pytest.approx(l, abs=1e-9)


def test_switch_condition_example1():
    p = example1()
    lm = adjoint_switch_condition(np.array([0.5]), np.array([1.0]), "s12", 0.0, p.cost, p.sys, "q1", "controlled")
    assert lm[0] == pytest.approx(-1.0)


def test_switch_condition_example2_adds_p():
    p = example2()
    lp, xm, pv = np.array([0.3, -0.2]), np.array([0.8, 0.0]), 0.25
    lm = adjoint_switch_condition(lp, xm, "s12", pv, p.cost, p.sys, "q1", "autonomous")
    assert np.allclose(lm, [0.3 + 0.8, -0.2 + 0.25])


def test_extremal_example1(ex1_extremal):
    e = ex1_extremal
    assert e.residual_norm <= 1e-8
    assert abs(hamiltonian_gap(e, 0)) <= 1e-6
    assert e.p_values == {}
    # terminal transversality
    xf = e.trajectory.final_state
    assert np.array_equal(e.adjoint_segments[-1][:, -1], e.problem.cost.terminal_gradient(xf))


def test_extremal_example2(ex2_extremal):
    e = ex2_extremal
    sw = e.trajectory.switches[0]
    assert abs(manifold_value(e.problem.sys, "q1", "q2", sw.x_minus)) <= 1e-8
    assert abs(hamiltonian_gap(e, 0)) <= 1e-6
    xf = e.trajectory.final_state
    assert np.allclose(e.adjoint_segments[-1][:, -1], [0.0, xf[1] - 1.0], atol=0, rtol=0)


def test_pointwise_minimality(ex1_extremal, rng):
    e = ex1_extremal
    p = e.problem
    for seg, lam, u in zip(e.trajectory.segments, e.adjoint_segments, e.controls):
        box = p.sys.control_sets[seg.q]
        for k in rng.integers(0, len(seg.t), 100):
            ur = rng.uniform(box.lower, box.upper)
            H0 = hamiltonian(seg.q, seg.x[:, k], lam[:, k], u[:, k], p.cost, p.sys)
            H1 = hamiltonian(seg.q, seg.x[:, k], lam[:, k], ur, p.cost, p.sys)
            assert H0 <= H1 + 1e-10


def test_gap_detects_shifted_switch(ex1, ex1_extremal):
    c = candidate(ex1, [ex1_extremal.switching_times[0] + 0.1])
    assert abs(hamiltonian_gap(c, 0)) > 1e-3


def test_p_matches_explicit_formula(ex2_extremal):
    # p from Hamiltonian continuity against the closed expression with the extremal controls
    e = ex2_extremal
    p = e.problem
    sw = e.trajectory.switches[0]
    lp = e.adjoint_segments[1][:, 0]
    um, up = e.controls[0][:, -1], e.controls[1][:, 0]
    fm = p.sys.field("q1", sw.x_minus, um)
    fp = p.sys.field("q2", sw.x_plus, up)
    num = lp @ (fp - fm) + p.cost.running_cost("q2", sw.x_plus, up) - p.cost.running_cost("q1", sw.x_minus, um) \
        - p.cost.switch_grad("s12", sw.x_minus) @ fm
    expected = num / fm[1]
    assert e.p_values[0] == pytest.approx(expected, abs=1e-6)
