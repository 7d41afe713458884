import json
import os

import numpy as np
import pytest

from hybridoc.config import ConfigError, build, config_hash, load
from hybridoc.core import HybridInput
from hybridoc.hmp import solve
from hybridoc.riccati import LqProblem
from hybridoc.simulate import evaluate_cost, simulate

HERE = os.path.dirname(__file__)


def test_builtin_with_params():
    p = build({"builtin": "example1", "params": {"x0": 2.0}})
    assert p.x0[0] == 2.0
    assert p.params["x0"] == 2.0


def test_lq_builtins_are_riccati_problems():
    assert isinstance(build({"builtin": "lq"}), LqProblem)
    assert isinstance(build({"builtin": "lq-scalar"}), LqProblem)


@pytest.mark.parametrize("cfg", [
    {"builtin": "nope"},
    {"builtin": "example1", "params": {"bogus": 1}},
    [1, 2],
    {"horizon": [0, 1]},
])
def test_bad_configs_raise(cfg):
    with pytest.raises(ConfigError):
        build(cfg)


def test_indefinite_R_rejected():
    cfg = {"horizon": [0, 1], "initial": {"q": "a", "x": [1.0]},
           "states": {"a": {"A": [[0.0]], "B": [[1.0]], "box": [[-1], [1]], "R": [[-1.0]]}}}
    with pytest.raises(ConfigError):
        build(cfg)


def test_unreadable_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load(bad)


def test_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


def test_explicit_oscillator_reproduces_preset(ex2, ex2_extremal):
    prob, raw = load(os.path.join(HERE, "oscillator.json"))
    assert raw["name"] == "oscillator"
    e = solve(prob)
    assert e.switching_times[0] == pytest.approx(ex2_extremal.switching_times[0], abs=1e-8)
    assert e.cost == pytest.approx(ex2_extremal.cost, abs=1e-9)


def test_bilinear_field_matches_example1(ex1):
    # x' = x + u x written as A = 1, B = 0, N = 1
    cfg = {"horizon": [0, 1], "initial": {"q": "q1", "x": [1.0]},
           "states": {"q1": {"A": [[1.0]], "B": [[0.0]], "N": [[[1.0]]], "box": [[-4], [4]]},
                      "q2": {"A": [[-1.0]], "B": [[0.0]], "N": [[[1.0]]], "box": [[-4], [4]]}},
           "transitions": [["q1", "s12", "q2"]], "jumps": {"s12": {"M": [[-1.0]]}},
           "terminal": {"Q": [[1.0]]}, "events": ["s12"], "kinds": ["controlled"], "switch_guess": [0.5]}
    prob = build(cfg)
    hin = HybridInput(lambda t, q, x: 0.3 * np.sin(3 * t) + 0.0 * x, ((0.4, "s12"),), ())
    a = simulate(prob.sys, hin, "q1", np.array([1.0]), (0.0, 1.0))
    b = simulate(ex1.sys, hin, "q1", np.array([1.0]), (0.0, 1.0))
    assert np.abs(a.final_state - b.final_state).max() <= 1e-13
    # running cost u^2/2 and terminal x^2/2 agree; the preset adds a switching cost
    assert evaluate_cost(a, prob.cost, hin) == pytest.approx(
        evaluate_cost(b, ex1.cost, hin) - ex1.cost.switch_cost("s12", a.switches[0].x_minus), abs=1e-12)
    x, lam = np.array([[0.7]]), np.array([[1.3]])
    assert prob.minimizers["q1"](x, lam)[0, 0] == pytest.approx(ex1.minimizers["q1"](x[:, 0], lam[:, 0])[0])


def test_roundtrip_file(tmp_path):
    cfg = {"builtin": "example2", "params": {"v_ref": 0.5}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    prob, raw = load(path)
    assert raw == cfg
    assert prob.params["v_ref"] == 0.5
