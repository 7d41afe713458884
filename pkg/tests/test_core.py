import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridoc.core import (
    Box,
    DimensionError,
    HybridInput,
    TransitionError,
    as_batch,
    augment_state,
    jump,
    manifold_value,
    numerical_jacobian,
    to_mayer,
    validate_system,
)
from hybridoc.presets import example1, example2
from hybridoc.simulate import evaluate_cost, simulate


def test_jump_example1_flips_sign():
    p = example1()
    q, x = jump(p.sys, "s12", "q1", np.array([3.0]))
    assert q == "q2"
    assert x[0] == -3.0


def test_jump_unknown_event():
    p = example1()
    with pytest.raises(TransitionError):
        jump(p.sys, "s12", "q2", np.array([1.0]))


def test_jump_wrong_dimension():
    p = example1()
    with pytest.raises(DimensionError):
        jump(p.sys, "s12", "q1", np.array([1.0, 2.0]))


@pytest.mark.parametrize("x, expected", [((1.5, 0.2), 0.2), ((7.0, 0.0), 0.0)])
def test_manifold_value_example2(x, expected):
    p = example2()
    assert manifold_value(p.sys, "q1", "q2", np.array(x)) == expected


def test_manifold_value_missing_pair():
    with pytest.raises(TransitionError):
        manifold_value(example2().sys, "q2", "q1", np.zeros(2))


def test_validate_accepts_example2_off_manifold():
    p = example2()
    rep = validate_system(p.sys, (0.0, 1.0), "q1", p.cost, samples=256)
    assert rep.accepted, rep.violations


def test_validate_flags_start_on_manifold():
    p = example2()
    rep = validate_system(p.sys, (1.0, 0.0), "q1", p.cost, samples=256)
    assert not rep.accepted
    assert any(v.startswith("A1") for v in rep.violations)


def test_mayer_accumulator_equals_switch_cost_for_zero_input():
    # u = 0 kills the running cost, so z(tf) is the switching cost alone
    p = example1()
    hs, hc = to_mayer(p.sys, p.cost)
    hin = HybridInput.constant(np.zeros(1), ((0.5, "s12"),))
    traj = simulate(hs, hin, "q1", augment_state([1.0]), (0.0, 1.0))
    xm = np.exp(0.5)
    assert traj.final_state[0] == pytest.approx(1.0 / (1.0 + xm ** 2), abs=1e-10)
    assert traj.final_state[1] == pytest.approx(-1.0, abs=1e-10)
    plain = simulate(p.sys, hin, "q1", np.array([1.0]), (0.0, 1.0))
    J = evaluate_cost(plain, p.cost, hin)
    assert hc.terminal_cost(traj.final_state) == pytest.approx(J, abs=1e-10)


def test_box_project_and_contains():
    b = Box([-1.0, 0.0], [1.0, 2.0])
    u = b.project(np.array([3.0, -1.0]))
    assert np.array_equal(u, [1.0, 0.0])
    assert b.contains(u)
    assert not b.contains(np.array([1.5, 0.0]))


def test_as_batch_returns_writable_copy():
    v = np.array([1.0, 2.0])
    out = as_batch(v, (2,), (3,))
    out[0, 0] = 9.0
    assert v[0] == 1.0
    assert out.shape == (2, 3)


def test_numerical_jacobian_linear_map():
    A = np.array([[1.0, 2.0], [3.0, -4.0]])
    J = numerical_jacobian(lambda x: A @ x, np.array([0.3, -0.7]))
    assert np.allclose(J, A, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_example2_jacobians_match_fields(x1, x2):
    p = example2()
    x, u = np.array([x1, x2]), np.array([0.4])
    for q in ("q1", "q2"):
        J = numerical_jacobian(lambda y: p.sys.field(q, y, u), x)
        assert np.allclose(p.sys.jacobian_x(q, x, u), J, atol=1e-6)
