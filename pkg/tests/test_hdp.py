import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridoc.core import Box, CostSpec, HybridInput, HybridSystem
from hybridoc.hdp import (
    GridError,
    GridSpec,
    ValueGrid,
    estimate_lipschitz,
    export_binary,
    export_csv,
    hjb_residual,
    load_binary,
    propagate_sensitivity,
    solve_hjb,
    value_gradient,
)
from hybridoc.simulate import IntegratorConfig, evaluate_cost, simulate

# x' = u, U = [-1, 1], l = 0, g = |x| has V = max(|x| - (tf - t), 0)
DRIFT = HybridSystem({"q": 1}, {"q": lambda x, u: u + 0.0 * x}, {"q": Box([-1.0], [1.0])})
ABS = CostSpec(terminal=lambda x: np.abs(x[0]))


def tabulated(fn, axes, t_nodes=(0.0, 1.0)):
    """Time-independent tabulation of ``fn`` over the tensor grid ``axes``."""
    mesh = np.meshgrid(*axes, indexing="ij")
    V = fn(*mesh)
    values = np.stack([V] * len(t_nodes))
    return ValueGrid("q", 0, np.asarray(t_nodes, float), [np.asarray(a, float) for a in axes], values,
                     np.zeros((len(t_nodes), 1) + V.shape), np.zeros(values.shape, bool))


@pytest.fixture(scope="module")
def drift_grid():
    return solve_hjb(DRIFT, ABS, ["q"], GridSpec((-2.0,), (2.0,), 1e-2, 1e-2), (0.0, 1.0))[0]


def test_closed_form_value(drift_grid):
    g = drift_grid
    exact = np.maximum(np.abs(g.x_nodes[0])[None] - (1.0 - g.t_nodes)[:, None], 0.0)
    assert np.abs(g.values - exact).max() <= 1e-2 + 1e-2


def test_terminal_slice_is_exact(drift_grid):
    assert np.array_equal(drift_grid.values[-1], np.abs(drift_grid.x_nodes[0]))


def test_residual_small_at_smooth_points(drift_grid):
    for t, x in [(0.2, 1.5), (0.5, -1.2), (0.7, 0.9), (0.1, 0.3)]:
        assert abs(hjb_residual(DRIFT, ABS, drift_grid, t, [x])) <= 5 * (1e-2 + 1e-2)


def test_gradient_of_quadratic_is_exact_at_nodes():
    ax = np.linspace(-1.0, 1.0, 41)
    g = tabulated(lambda x: 0.5 * x ** 2, [ax])
    for x in ax[5:-5:7]:
        assert value_gradient(g, 0.0, [x])[0] == pytest.approx(x, abs=1e-12)


def test_gradient_of_linear_table():
    ax = [np.linspace(-1.0, 1.0, 21), np.linspace(0.0, 2.0, 11)]
    g = tabulated(lambda a, b: 3.0 * a - 2.0 * b, ax)
    assert np.allclose(value_gradient(g, 0.0, [0.13, 0.77]), [3.0, -2.0], atol=1e-12)


def test_gradient_of_closed_form(drift_grid):
    # V = max(|x| - s, 0) with s = 0.5 at t = 0.5
    for x in (1.2, -1.4):
        assert value_gradient(drift_grid, 0.5, [x])[0] == pytest.approx(np.sign(x), abs=5e-2)


def test_gradient_rejects_boundary_point(drift_grid):
    with pytest.raises(GridError):
        value_gradient(drift_grid, 0.5, [2.0])


def test_lipschitz_of_quadratic_approaches_one():
    ks = []
    for n in (41, 401):
        ax = np.linspace(-1.0, 1.0, n)
        ks.append(estimate_lipschitz(tabulated(lambda x: 0.5 * x ** 2, [ax])))
    assert abs(ks[1] - 1.0) < abs(ks[0] - 1.0)
    assert ks[1] == pytest.approx(1.0, abs=5e-3)


def test_lipschitz_of_constant_is_zero():
    assert estimate_lipschitz(tabulated(lambda x: 0.0 * x + 2.0, [np.linspace(0.0, 1.0, 11)])) == 0.0


def test_one_step_reproduces_linear_terminal_data():
    # l = 0, frozen dynamics: one backward step interpolates g at the feet
    sys = HybridSystem({"q": 1}, {"q": lambda x, u: 0.5 + 0.0 * x + 0.0 * u}, {"q": Box([0.0], [0.0])})
    cost = CostSpec(terminal=lambda x: 2.0 * x[0] - 1.0)
    g = solve_hjb(sys, cost, ["q"], GridSpec((-1.0,), (1.0,), 0.1, 0.1, levels=2), (0.0, 0.1))[0]
    x = g.x_nodes[0][:-1]
    assert np.allclose(g.values[0][:-1], 2.0 * (x + 0.05) - 1.0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(0.0, 0.5), min_size=3, max_size=3), st.integers(0, 10_000))
def test_raising_terminal_data_never_lowers_value(bumps, seed):
    # monotone scheme: g1 >= g pointwise implies V1 >= V everywhere, and by no more than sup(g1 - g)
    centers = np.random.default_rng(seed).uniform(-1.5, 1.5, 3)

    def raised(x):
        return np.abs(x[0]) + sum(b * np.exp(-((x[0] - c) / 0.3) ** 2) for b, c in zip(bumps, centers))

    spec = GridSpec((-2.0,), (2.0,), 4e-2, 4e-2)
    base = solve_hjb(DRIFT, ABS, ["q"], spec, (0.0, 1.0))[0]
    up = solve_hjb(DRIFT, CostSpec(terminal=raised), ["q"], spec, (0.0, 1.0))[0]
    diff = up.values - base.values
    assert diff.min() >= -1e-12
    assert diff.max() <= sum(bumps) + 1e-12


def test_csv_and_binary_exports(tmp_path, drift_grid):
    export_csv(drift_grid, tmp_path / "v.csv", every=50)
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert len(lines) > 1
    export_binary(drift_grid, tmp_path / "v.bin")
    back = load_binary(tmp_path / "v.bin")
    assert np.array_equal(back["values"], drift_grid.values)


def test_sensitivity_constant_cost_map():
    sys = HybridSystem({"q": 1}, {"q": lambda x, u: 0.0 * x}, {"q": Box([-1.0], [1.0])})
    cost = CostSpec(terminal=lambda x: float(x[0]), terminal_grad=lambda x: np.ones(1))
    s = propagate_sensitivity(sys, cost, HybridInput.constant(np.zeros(1)), "q", np.array([0.4]), (0.0, 1.0))
    for g in s.gradients:
        assert np.all(g == 1.0)


def central_difference(prob, hin, h=1e-5, cfg=IntegratorConfig(step=1e-4)):
    out = []
    for i in range(len(prob.x0)):
        e = np.zeros(len(prob.x0))
        e[i] = h
        J = [evaluate_cost(simulate(prob.sys, hin, prob.q0, prob.x0 + s * e, prob.span, cfg), prob.cost, hin)
             for s in (1.0, -1.0)]
        out.append((J[0] - J[1]) / (2 * h))
    return np.array(out)


def test_sensitivity_example1_scheduled_switch(ex1):
    hin = HybridInput(lambda t, q, x: -0.3 * x, ((0.4, "s12"),))
    s = propagate_sensitivity(ex1.sys, ex1.cost, hin, ex1.q0, ex1.x0, ex1.span)
    fd = central_difference(ex1, hin)
    assert np.abs(s.initial - fd).max() <= 1e-4 * np.abs(fd).max()


def test_sensitivity_example2_autonomous_switch(ex2):
    hin = HybridInput.constant(np.array([0.2]))
    s = propagate_sensitivity(ex2.sys, ex2.cost, hin, ex2.q0, ex2.x0, ex2.span)
    fd = central_difference(ex2, hin)
    assert np.abs(s.initial - fd).max() <= 1e-4 * np.abs(fd).max()
    assert s.p_values[0] != 0.0


def test_example1_grid_value_below_oracle_costs(ex1_stack_coarse):
    # best cost found by the discrete search over switch times and piecewise-constant inputs
    assert ex1_stack_coarse[0].interpolate(0.0, [1.0]) <= 0.520498068778


def test_example1_grid_residual_in_continuation_region(ex1, ex1_stack_coarse):
    G = ex1_stack_coarse
    rng = np.random.default_rng(7)
    res = []
    while len(res) < 100:
        t, x = rng.uniform(0.0, 0.99), rng.uniform(0.5, 2.0)
        v_switch = G[1].interpolate(t, [-x]) + ex1.cost.switch_cost("s12", np.array([x]))
        if G[0].interpolate(t, [x]) >= v_switch - 1e-9:
            continue
        res.append(abs(hjb_residual(ex1.sys, ex1.cost, G[0], t, [x])))
    assert np.median(res) <= 5 * 2e-3
