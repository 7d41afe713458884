"""JSON problem definitions.

A config either names a built-in problem::

    {"builtin": "example1", "params": {"x0": 1.0, "tf": 1.0}}

or spells one out with control-affine fields, quadratic costs and affine
jumps and manifolds (all matrices as nested lists)::

    {
      "name": "flip",
      "horizon": [0.0, 1.0],
      "initial": {"q": "q1", "x": [1.0]},
      "states": {
        "q1": {"A": [[1.0]], "B": [[0.0]], "N": [[[1.0]]], "c": [0.0],
               "box": [[-4.0], [4.0]], "Q": [[0.0]], "R": [[1.0]]},
        ...
      },
      "transitions": [["q1", "s12", "q2"]],
      "jumps": {"s12": {"M": [[-1.0]], "v": [0.0]}},
      "manifolds": [{"from": "q1", "to": "q2", "a": [0.0, 1.0], "b": 0.0}],
      "switch_costs": {"s12": {"Q": [[1.0]], "q": [0.0], "c": 0.0}},
      "terminal": {"Q": [[1.0]], "q": [0.0], "c": 0.0},
      "events": ["s12"],
      "switch_guess": [0.5],
      "p_guess": []
    }

Location ``q`` has ``f = A x + B u + sum_k u_k N[k] x + c`` and running
cost ``x^T Q x / 2 + u^T R u / 2``.  Jumps are ``M x + v``, manifolds
``a . x + b``, switching and terminal costs ``x^T Q x / 2 + q . x + c``.
Omitted ``N``, ``c``, ``Q``, jumps and costs are zero (identity for jumps).
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .core import (
    AUTONOMOUS,
    CONTROLLED,
    Box,
    CostSpec,
    HybridProblem,
    HybridSystem,
    JumpMap,
    Manifold,
    SwitchCost,
)
from .presets import example1, example2
from .riccati import oscillator_instance, tanh_instance


class ConfigError(ValueError):
    """Malformed or inconsistent problem definition."""


BUILTINS = {
    "example1": example1,
    "example2": example2,
    "lq": oscillator_instance,
    "lq-scalar": tanh_instance,
}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def load(path):
    """Read a JSON file and build its problem (see :func:`build`)."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build(cfg), cfg


def build(cfg: dict):
    """Problem described by a parsed config.

    Returns a :class:`HybridProblem`, or an ``LqProblem`` for the LQ
    built-ins.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "builtin" in cfg:
        name = cfg["builtin"]
        if name not in BUILTINS:
            raise ConfigError(f"unknown built-in {name!r}; choose from {sorted(BUILTINS)}")
        params = cfg.get("params", {})
        try:
            return BUILTINS[name](**params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {name}: {exc}") from None
    try:
        return _explicit(cfg)
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _arr(v, ndim, what):
    a = np.asarray(v, dtype=float)
    if a.ndim != ndim:
        raise ConfigError(f"{what} must have {ndim} dimension(s)")
    return a


def _field(A, B, N, c):
    def f(x, u):
        out = np.tensordot(A, x, axes=1) + np.tensordot(B, u, axes=1) + c.reshape((-1,) + (1,) * (x.ndim - 1))
        for k in range(len(N)):
            out = out + u[k] * np.tensordot(N[k], x, axes=1)
        return out

    def fx(x, u):
        J = A.reshape(A.shape + (1,) * (x.ndim - 1)) + np.zeros(A.shape + x.shape[1:])
        for k in range(len(N)):
            J = J + N[k].reshape(N[k].shape + (1,) * (x.ndim - 1)) * u[k]
        return J

    def fu(x, u):
        cols = [B[:, k].reshape((-1,) + (1,) * (x.ndim - 1)) + np.tensordot(N[k], x, axes=1)
                for k in range(B.shape[1])]
        return np.stack(cols, axis=1)

    return f, fx, fu


def _quad(Q, q, c):
    return (lambda x: 0.5 * x @ Q @ x + q @ x + c), (lambda x: Q @ x + q)


def _explicit(cfg):
    states = cfg["states"]
    dims, fields, fxs, fus, boxes, running, rgx, rgu, minim = {}, {}, {}, {}, {}, {}, {}, {}, {}
    for q, spec in states.items():
        A = _arr(spec["A"], 2, f"{q}.A")
        n = A.shape[0]
        B = _arr(spec["B"], 2, f"{q}.B")
        m = B.shape[1]
        N = _arr(spec.get("N", np.zeros((m, n, n))), 3, f"{q}.N")
        c = _arr(spec.get("c", np.zeros(n)), 1, f"{q}.c")
        if A.shape != (n, n) or B.shape[0] != n or N.shape != (m, n, n) or c.shape != (n,):
            raise ConfigError(f"inconsistent field dimensions in location {q}")
        lo, hi = spec["box"]
        boxes[q] = Box(np.asarray(lo, float), np.asarray(hi, float))
        if boxes[q].dim != m:
            raise ConfigError(f"box of {q} has dimension {boxes[q].dim}, B has {m} columns")
        Q = _arr(spec.get("Q", np.zeros((n, n))), 2, f"{q}.Q")
        R = _arr(spec.get("R", np.eye(m)), 2, f"{q}.R")
        if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
            raise ConfigError(f"R of {q} must be positive definite")
        dims[q] = n
        fields[q], fxs[q], fus[q] = _field(A, B, N, c)
        running[q] = (lambda Q, R: lambda x, u: 0.5 * np.einsum("i...,ij,j...->...", x, Q, x)
                      + 0.5 * np.einsum("i...,ij,j...->...", u, R, u))(Q, R)
        rgx[q] = (lambda Q: lambda x, u: np.tensordot(Q, x, axes=1))(Q)
        rgu[q] = (lambda R: lambda x, u: np.tensordot(R, u, axes=1))(R)
        minim[q] = _minimizer(B, N, np.linalg.inv(R))
    automaton = {}
    for entry in cfg.get("transitions", []):
        p, sigma, r = entry
        automaton[(p, sigma)] = r
    jumps = {}
    for sigma, spec in cfg.get("jumps", {}).items():
        M = _arr(spec["M"], 2, f"jump {sigma}.M")
        v = _arr(spec.get("v", np.zeros(M.shape[0])), 1, f"jump {sigma}.v")
        jumps[sigma] = JumpMap((lambda M, v: lambda x: M @ x + v)(M, v), (lambda M: lambda x: M.copy())(M))
    manifolds = {}
    for spec in cfg.get("manifolds", []):
        a = _arr(spec["a"], 1, "manifold a")
        b = float(spec.get("b", 0.0))
        manifolds[(spec["from"], spec["to"])] = Manifold((lambda a, b: lambda x: np.tensordot(a, x, axes=1) + b)(a, b),
                                                         (lambda a: lambda x: a.copy())(a))
    sys = HybridSystem(dims, fields, boxes, automaton, jumps, manifolds, fxs, fus)
    switching = {}
    for sigma, spec in cfg.get("switch_costs", {}).items():
        n = len(spec.get("q", spec.get("Q", [[]])[0] if "Q" in spec else []))
        Q = _arr(spec.get("Q", np.zeros((n, n))), 2, f"switch cost {sigma}.Q")
        n = Q.shape[0]
        fn, gr = _quad(Q, _arr(spec.get("q", np.zeros(n)), 1, "q"), float(spec.get("c", 0.0)))
        switching[sigma] = SwitchCost(fn, gr)
    term = cfg.get("terminal")
    terminal, terminal_grad = (lambda x: 0.0), None
    if term:
        Q = _arr(term["Q"], 2, "terminal.Q")
        terminal, terminal_grad = _quad(Q, _arr(term.get("q", np.zeros(Q.shape[0])), 1, "terminal.q"),
                                        float(term.get("c", 0.0)))
    cost = CostSpec(running, rgx, rgu, switching, terminal, terminal_grad)
    t0, tf = map(float, cfg["horizon"])
    init = cfg["initial"]
    events = tuple(cfg.get("events", ()))
    kinds = tuple(cfg.get("kinds", ()))
    for k in kinds:
        if k not in (AUTONOMOUS, CONTROLLED):
            raise ConfigError(f"unknown switch kind {k!r}")
    return HybridProblem(
        sys=sys, cost=cost, q0=init["q"], x0=np.asarray(init["x"], dtype=float), t0=t0, tf=tf,
        events=events, kinds=kinds, minimizers=minim, switch_guess=tuple(cfg.get("switch_guess", ())),
        p_guess=tuple(cfg.get("p_guess", ())), name=cfg.get("name", "config"), params={"config": config_hash(cfg)},
    )


def _minimizer(B, N, Rinv):
    """Unconstrained minimiser ``-R^-1 (B + N x)^T lam`` of the quadratic-in-u Hamiltonian."""

    def umin(x, lam):
        g = np.tensordot(B.T, lam, axes=1)
        if len(N):
            g = g + np.stack([np.einsum("i...,ij,j...->...", lam, N[k], x) for k in range(len(N))])
        return -np.tensordot(Rinv, g, axes=1)

    return umin
