import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridoc.core import Box, CostSpec, HybridInput, HybridSystem, Manifold
from hybridoc.presets import example1, example2
from hybridoc.simulate import (
    BlowUpError,
    IntegratorConfig,
    ManifoldTerminationError,
    evaluate_cost,
    integrate_segment,
    locate_crossing,
    simulate,
)


def scalar_system(f, manifolds=None, automaton=None):
    return HybridSystem({"q": 1, "r": 1}, {"q": f, "r": f}, {"q": Box([-10.0], [10.0]), "r": Box([-10.0], [10.0])},
                        automaton or {}, {}, manifolds or {})


def zero_control(t, x):
    return np.zeros((1,) + np.shape(x)[1:])


def test_constant_field_exact():
    seg = integrate_segment(lambda x, u: u + 0.0 * x, np.array([1.0]), lambda t, x: np.full((1,) + np.shape(x)[1:], 2.0),
                            (0.0, 1.0))
    # exact up to the roundoff of 1000 additions
    assert abs(seg.x[0, -1] - 3.0) <= 1e-12


def test_exponential_growth():
    seg = integrate_segment(lambda x, u: x, np.array([1.0]), zero_control, (0.0, 1.0), IntegratorConfig(step=1e-3))
    assert abs(seg.x[0, -1] - math.e) <= 1e-10


def test_harmonic_oscillator_quarter_period():
    p = example2()
    f = p.sys.vector_fields["q1"]
    seg = integrate_segment(f, np.array([0.0, 1.0]), zero_control, (0.0, math.pi / 4))
    for k in range(0, len(seg.t), 25):
        t = seg.t[k]
        assert np.abs(seg.x[:, k] - [math.sin(t), math.cos(t)]).max() <= 1e-9


def test_dense_output_between_knots():
    seg = integrate_segment(lambda x, u: x, np.array([1.0]), zero_control, (0.0, 1.0), IntegratorConfig(step=1e-2))
    assert seg(0.505)[0] == pytest.approx(math.exp(0.505), rel=1e-8)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reported():
    with pytest.raises(BlowUpError):
        integrate_segment(lambda x, u: x ** 2, np.array([1.0]), zero_control, (0.0, 2.0), IntegratorConfig(step=1e-2))


def test_rk4_order():
    errs = []
    for h in (0.1, 0.05):
        seg = integrate_segment(lambda x, u: x, np.array([1.0]), zero_control, (0.0, 1.0), IntegratorConfig(step=h))
        errs.append(abs(seg.x[0, -1] - math.e))
    assert math.log2(errs[0] / errs[1]) >= 3.9


def test_locate_crossing_linear_decay():
    m = Manifold(lambda x: x[0], lambda x: np.array([1.0]))
    f = lambda x, u: -1.0 + 0.0 * x
    t, x, transversal = locate_crossing(f, zero_control, m, (0.9, np.array([0.1]), 1.1, np.array([-0.1])))
    assert t == pytest.approx(1.0, abs=1e-10)
    assert transversal


def test_example2_zero_input_crossing():
    p = example2()
    hin = HybridInput.constant(np.zeros(1))
    traj = simulate(p.sys, hin, p.q0, p.x0, p.span)
    assert len(traj.switches) == 1
    sw = traj.switches[0]
    assert abs(sw.t - math.pi / 2) <= 1e-8
    assert np.abs(sw.x_minus - [1.0, 0.0]).max() <= 1e-8
    assert traj.discrete_path == ("q1", "q2")
    assert np.abs(traj.final_state - [1.0, 0.0]).max() <= 1e-8


def test_example1_forced_switch_flips_state():
    p = example1()
    hin = HybridInput.constant(np.zeros(1), ((0.5, "s12"),))
    traj = simulate(p.sys, hin, p.q0, p.x0, p.span)
    sw = traj.switches[0]
    assert sw.t == 0.5
    assert sw.x_minus[0] == pytest.approx(math.exp(0.5), rel=1e-12)
    assert sw.x_plus[0] == -sw.x_minus[0]
    assert traj.final_state[0] == pytest.approx(-1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.2, 2.0))
def test_example1_zero_input_cost_closed_form(ts, x0):
    p = example1()
    hin = HybridInput.constant(np.zeros(1), ((ts, "s12"),))
    traj = simulate(p.sys, hin, p.q0, np.array([x0]), p.span)
    xm = x0 * math.exp(ts)
    xf = -xm * math.exp(-(1.0 - ts))
    expected = 1.0 / (1.0 + xm ** 2) + 0.5 * xf ** 2
    assert evaluate_cost(traj, p.cost, hin) == pytest.approx(expected, rel=1e-10)


def test_terminal_only_cost_of_frozen_state():
    sys = scalar_system(lambda x, u: 0.0 * x)
    cost = CostSpec(terminal=lambda x: float(x[0]))
    hin = HybridInput.constant(np.zeros(1))
    traj = simulate(sys, hin, "q", np.array([4.0]), (0.0, 1.0))
    assert evaluate_cost(traj, cost, hin) == 4.0


def test_no_switch_matches_integrate_segment():
    f = lambda x, u: -0.5 * x + u
    sys = scalar_system(f)
    ctrl = lambda t, x: np.full((1,) + np.shape(x)[1:], 0.3)
    traj = simulate(sys, HybridInput(lambda t, q, x: ctrl(t, x)), "q", np.array([1.0]), (0.0, 1.0))
    seg = integrate_segment(f, np.array([1.0]), ctrl, (0.0, 1.0))
    assert len(traj.segments) == 1
    assert np.array_equal(traj.segments[0].x, seg.x)


def test_tangent_arrival_terminates():
    # x2' = -2 t reaches x2 = 0 with zero normal speed at t = 0
    sys = HybridSystem({"q": 2, "r": 2}, {"q": lambda x, u: np.stack([1.0 + 0.0 * x[0], -2.0 * x[0]]),
                                          "r": lambda x, u: 0.0 * x},
                       {"q": Box([-1.0], [1.0]), "r": Box([-1.0], [1.0])}, {("q", "a"): "r"}, {},
                       {("q", "r"): Manifold(lambda x: x[1], lambda x: np.array([0.0, 1.0]))})
    hin = HybridInput.constant(np.zeros(1))
    with pytest.raises(ManifoldTerminationError):
        simulate(sys, hin, "q", np.array([-1.0, -1.0 + 1e-12]), (0.0, 2.0),
                 IntegratorConfig(step=1e-3, transversality_floor=1e-3))


def test_reruns_are_bit_identical():
    p = example2()
    hin = HybridInput.constant(np.array([0.2]))
    a = simulate(p.sys, hin, p.q0, p.x0, p.span)
    b = simulate(p.sys, hin, p.q0, p.x0, p.span)
    assert a.switches[0].t == b.switches[0].t
    for sa, sb in zip(a.segments, b.segments):
        assert np.array_equal(sa.x, sb.x)
        assert np.array_equal(sa.t, sb.t)
