import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridoc.core import HybridInput
from hybridoc.hmp import solve
from hybridoc.riccati import (
    LqCost,
    LqHybridSystem,
    LqLocation,
    LqProblem,
    feedback,
    hamiltonian_min_value,
    oscillator_instance,
    riccati_backward,
    solve_tracking,
    switch_condition_residual,
    switch_jump,
    tanh_instance,
)
from hybridoc.simulate import IntegratorConfig, evaluate_cost, simulate


def test_scalar_riccati_is_tanh():
    path = riccati_backward(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, (0.0, 1.0), IntegratorConfig(step=1e-3))
    assert np.abs(path.K[:, 0, 0] - np.tanh(1.0 - path.t)).max() <= 1e-8


def test_zero_data_gives_zero_solution():
    path = riccati_backward(np.eye(2), np.ones((2, 1)), np.zeros((2, 2)), 1.0, np.zeros(2), np.zeros(2),
                            np.zeros((2, 2)), np.zeros(2), (0.0, 1.0))
    assert np.all(path.K == 0.0)
    assert np.all(path.s == 0.0)


def test_offset_against_finer_step():
    args = (0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, (0.0, 1.0))
    a = riccati_backward(*args, cfg=IntegratorConfig(step=1e-3))
    b = riccati_backward(*args, cfg=IntegratorConfig(step=1e-4))
    assert abs(a.s[0, 0] - b.s[0, 0]) <= 1e-8
    assert np.abs(a.s[:, 0] - b.s_at(a.t)[:, 0]).max() <= 1e-8


def test_switch_jump_identity():
    K, s = np.array([[2.0, 0.5], [0.5, 1.0]]), np.array([0.3, -0.1])
    Km, sm = switch_jump(K, s, np.eye(2), np.zeros((2, 2)), np.zeros(2), 0.0, None, np.zeros(2))
    assert np.array_equal(Km, K)
    assert np.array_equal(sm, s)


def test_switch_jump_scalar_flip():
    Km, sm = switch_jump(1.7, 0.4, -1.0, 0.0, 0.0, 0.0, None, 0.0)
    assert Km[0, 0] == 1.7
    assert sm[0] == -0.4


def test_switch_jump_with_cost_and_surface():
    K, s = np.array([[2.0, 0.5], [0.5, 1.0]]), np.array([0.3, -0.1])
    Km, sm = switch_jump(K, s, np.eye(2), np.diag([1.0, 0.0]), np.zeros(2), 0.3, [0.0, 1.0], np.zeros(2))
    assert np.allclose(Km - K, [[1.0, 0.0], [0.0, 0.0]])
    assert np.allclose(sm - s, [0.0, 0.3])


@pytest.mark.parametrize("K, s, x, expected", [(2.0, 1.0, 3.0, -7.0), (2.0, 0.0, 0.0, 0.0)])
def test_feedback_formula(K, s, x, expected):
    assert feedback(K, s, x, 1.0, 1.0)[0] == pytest.approx(expected)


def test_feedback_rejects_indefinite_R():
    with pytest.raises(ValueError):
        feedback(1.0, 0.0, 1.0, 1.0, -1.0)


def test_hamiltonian_min_value_cases():
    assert hamiltonian_min_value(0.0, 0.7, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.7) == 0.0
    # lam = K x + s = 2: 1/2 + 2 * (0 - 1/2 * 2 + 0)
    assert hamiltonian_min_value(0.0, 1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0) == pytest.approx(-1.5)


def test_tanh_feedback_matches_hmp_control():
    lq = tanh_instance()
    sol = lq.solve()
    e = solve(lq.to_problem())
    seg = e.trajectory.segments[0]
    for k in range(0, len(seg.t), 50):
        t, x = seg.t[k], seg.x[:, k]
        u_ric = -np.tanh(1.0 - t) * x[0]
        assert abs(e.controls[0][0, k] - u_ric) <= 1e-6
        assert abs(sol.gain(t)[0, 0] * x[0] + e.controls[0][0, k]) <= 1e-6


def test_tracking_cost_beats_perturbed_controls(rng):
    lq = tanh_instance(r=1.0)
    sol = lq.solve()
    prob = lq.to_problem()
    seg = sol.trajectory.segments[0]
    u_opt = np.array([-(sol.gain(t) @ seg.x[:, k] + sol.offset(t))[0] for k, t in enumerate(seg.t)])
    J_opt = sol.cost_value()
    cfg = IntegratorConfig(step=1e-3)
    for _ in range(100):
        a, b = np.sort(rng.uniform(0.0, 1.0, 2))
        amp = rng.uniform(-0.1, 0.1)

        def ctrl(t, q, x, a=a, b=b, amp=amp):
            v = np.interp(t, seg.t, u_opt) + (amp if a <= t < b else 0.0)
            return np.full((1,) + np.shape(x)[1:], v)

        hin = HybridInput(ctrl, (), (a, b))
        J = evaluate_cost(simulate(prob.sys, hin, prob.q0, prob.x0, prob.span, cfg), prob.cost, hin)
        assert J >= J_opt - 1e-8


def test_invisible_switch_matches_single_location():
    loc = LqLocation([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]])
    two = LqHybridSystem({"a": loc, "b": loc}, automaton={("a", "s"): "b"})
    cost2 = LqCost(L={"a": np.eye(2), "b": np.eye(2)}, R={"a": 1.0, "b": 1.0}, G=np.eye(2))
    one = LqHybridSystem({"a": loc})
    cost1 = LqCost(L={"a": np.eye(2)}, R={"a": 1.0}, G=np.eye(2))
    x0 = np.array([1.0, 0.5])
    s2 = solve_tracking(two, cost2, "a", ("s",), x0, (0.0, 2.0), (0.9,), kinds=("controlled",))
    s1 = solve_tracking(one, cost1, "a", (), x0, (0.0, 2.0))
    for t in (0.0, 0.5, 1.5):
        assert np.abs(s2.K(t) - s1.K(t)).max() <= 1e-10
    assert s2.cost_value() == pytest.approx(s1.cost_value(), abs=1e-10)


def test_oscillator_switch_conditions():
    sol = oscillator_instance().solve()
    assert switch_condition_residual(sol, 0) <= 1e-8
    for st_ in sol.stages:
        assert np.abs(st_.K - np.swapaxes(st_.K, 1, 2)).max() <= 1e-10
        assert np.linalg.eigvalsh(st_.K).min() >= -1e-8
    sw = sol.trajectory.switches[0]
    assert abs(sw.x_minus[1]) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3))
def test_switch_jump_keeps_symmetry(a, b, c):
    K = np.array([[c, a], [a, c + 4.0]])
    P = np.array([[1.0, b], [0.0, 1.0]])
    Km, _ = switch_jump(K, np.zeros(2), P, np.eye(2), np.zeros(2), 0.0, None, np.zeros(2))
    assert np.array_equal(Km, Km.T)
