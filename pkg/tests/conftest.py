"""Shared, session-scoped solves.  The solvers are deterministic, so one
solve per session serves every test that only reads the result."""
import time

import numpy as np
import pytest

from hybridoc.hdp import GridSpec, solve_hjb
from hybridoc.hmp import solve
from hybridoc.presets import GRID_DEFAULTS, example1, example2

EX1_BOXES = GRID_DEFAULTS["example1"]["boxes"]


_GRIDS = {}

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def ex1_grids(d):
    """Example 1 value stack at dx = dt = d, built once per session."""
    return timed_ex1_grids(d)[0]


def timed_ex1_grids(d):
    """``(stack, build seconds)``; the seconds are those of the first build."""
    if d not in _GRIDS:
        prob = example1()
        specs = [GridSpec(lo, hi, d, d) for lo, hi in EX1_BOXES]
        t0 = time.perf_counter()
        stack = solve_hjb(prob.sys, prob.cost, prob.q_sequence, specs, prob.span)
        _GRIDS[d] = (stack, time.perf_counter() - t0)
    return _GRIDS[d]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(scope="session")
def ex1():
    return example1()


@pytest.fixture(scope="session")
def ex2():
    return example2()


@pytest.fixture(scope="session")
def ex1_extremal(ex1):
    return solve(ex1)


@pytest.fixture(scope="session")
def ex2_extremal(ex2):
    return solve(ex2)


@pytest.fixture(scope="session")
def ex1_stack_coarse():
    return ex1_grids(1e-3)


@pytest.fixture(scope="session")
def ex1_stack_fine():
    return ex1_grids(5e-4)


@pytest.fixture(scope="session")
def ex2_stack(ex2):
    d = GRID_DEFAULTS["example2"]
    specs = [GridSpec(lo, hi, d["dx"], d["dt"]) for lo, hi in d["boxes"]]
    return solve_hjb(ex2.sys, ex2.cost, ex2.q_sequence, specs, ex2.span)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
