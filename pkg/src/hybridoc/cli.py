"""Command-line front end.

Every subcommand writes its artifacts and a ``manifest.json`` (config hash,
tolerances, SHA-256 of each emitted file) under ``--out``.  Exit codes: 0 on
success, 1 when a solver fails, 2 for bad arguments or configs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, build, load
from .core import AUTONOMOUS, HybridError, HybridInput, HybridProblem
from .equivalence import compare
from .export import (
    sha256,
    write_extremal,
    write_riccati,
    write_riccati_switches,
    write_switches,
    write_trajectory,
)
from .hdp import GridSpec, export_binary, export_csv, propagate_sensitivity, solve_hjb
from .hmp import HmpConfig, hamiltonian_gap, solve
from .oracle import brute_force
from .presets import GRID_DEFAULTS
from .riccati import LqProblem
from .simulate import IntegratorConfig, evaluate_cost, simulate, simulate_many

DEFAULT_SEED = 20240607
PRESET_NAMES = ("example1", "example2", "lq")


@dataclass
class RunConfig:
    subcommand: str
    preset: Optional[str] = None
    config: Optional[str] = None
    out: str = "out"
    tol: Optional[float] = None
    grid: Optional[tuple] = None
    boxes: list = field(default_factory=list)
    seed: int = DEFAULT_SEED
    u: float = 0.0
    no_switch: bool = False
    switch: list = field(default_factory=list)
    step: Optional[float] = None

    def digest(self, params) -> str:
        blob = {k: v for k, v in asdict(self).items() if k != "out"}
        blob["params"] = params
        return hashlib.sha256(json.dumps(blob, sort_keys=True, default=str).encode()).hexdigest()


class UsageError(Exception):
    pass


def _floats(text: str, what: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} expects comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridoc", description="Optimal control of hybrid systems.")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    helps = {
        "simulate": "simulate a constant control and write the trajectory",
        "hmp": "solve the minimum principle conditions by shooting",
        "hdp": "tabulate the value function on a grid",
        "riccati": "solve an LQ tracking problem by Riccati equations",
        "verify": "compare adjoint and value gradient, check the cost sensitivity",
        "oracle": "discrete search over switching times and piecewise-constant controls",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("problem", nargs="?", help=f"preset: {', '.join(PRESET_NAMES)}")
        p.add_argument("--config", help="JSON problem definition")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--tol", type=float, help="solver tolerance")
        p.add_argument("--grid", help="dx,dt of the value grids")
        p.add_argument("--box", action="append", default=[],
                       help="grid box lo,hi[,lo,hi...]; repeat once per stage or give one for all")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--u", type=float, default=0.0, help="constant control for simulate")
        p.add_argument("--no-switch", action="store_true", help="riccati: scalar instance without switches")
        p.add_argument("--switch", action="append", type=float, default=[],
                       help="simulate: time of a controlled switch (repeatable)")
        p.add_argument("--step", type=float, help="integration step")
    return ap


def _run_config(ns) -> RunConfig:
    if ns.no_switch and ns.subcommand == "riccati" and ns.problem is None and ns.config is None:
        ns.problem = "lq"
    if (ns.problem is None) == (ns.config is None):
        raise UsageError("give exactly one of a preset name or --config")
    if ns.problem is not None and ns.problem not in PRESET_NAMES:
        raise UsageError(f"unknown preset {ns.problem!r}; choose from {', '.join(PRESET_NAMES)}")
    grid = None
    if ns.grid:
        grid = tuple(_floats(ns.grid, "--grid"))
        if len(grid) != 2 or min(grid) <= 0:
            raise UsageError("--grid expects two positive numbers dx,dt")
    boxes = []
    for b in ns.box:
        vals = _floats(b, "--box")
        if len(vals) % 2:
            raise UsageError("--box expects lo,hi pairs")
        boxes.append((tuple(vals[0::2]), tuple(vals[1::2])))
    for name in ("tol", "step"):
        v = getattr(ns, name)
        if v is not None and v <= 0:
            raise UsageError(f"--{name} must be positive")
    return RunConfig(ns.subcommand, ns.problem, ns.config, ns.out, ns.tol, grid, boxes, ns.seed, ns.u,
                     ns.no_switch, list(ns.switch), ns.step)


def _load_problem(rc: RunConfig):
    if rc.config:
        prob, raw = load(rc.config)
        return prob, raw.get("builtin", raw.get("name", "config"))
    if rc.preset == "lq":
        return build({"builtin": "lq-scalar" if rc.no_switch else "lq"}), "lq"
    return build({"builtin": rc.preset}), rc.preset


def _params(prob):
    if isinstance(prob, HybridProblem):
        return dict(prob.params)
    return {"name": prob.name, "x0": np.asarray(prob.x0).tolist(), "span": list(map(float, prob.span))}


def _general(prob):
    return prob.to_problem() if isinstance(prob, LqProblem) else prob


def _grids(rc: RunConfig, prob: HybridProblem, key: str):
    d = GRID_DEFAULTS.get(key)
    L = prob.n_switches
    if rc.boxes:
        boxes = rc.boxes if len(rc.boxes) > 1 else rc.boxes * (L + 1)
    elif d is not None:
        boxes = d["boxes"]
    else:
        raise UsageError("problems without grid defaults need --box")
    if len(boxes) != L + 1:
        raise UsageError(f"need one box per stage ({L + 1}), got {len(boxes)}")
    if rc.grid:
        dx, dt = rc.grid
    elif d is not None:
        dx, dt = d["dx"], d["dt"]
    else:
        dx, dt = 1e-2, 1e-3
    specs = []
    for (lo, hi), q in zip(boxes, prob.q_sequence):
        if len(lo) != prob.sys.state_dims[q]:
            raise UsageError(f"box for {q} has dimension {len(lo)}, state has {prob.sys.state_dims[q]}")
        specs.append(GridSpec(lo, hi, dx, dt))
    return specs


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _cmd_simulate(rc, prob, out):
    prob = _general(prob)
    cfg = IntegratorConfig(step=rc.step or 1e-3)
    times = rc.switch or [t for t, k in zip(prob.switch_guess, prob.kinds) if k != AUTONOMOUS]
    events = [e for e, k in zip(prob.events, prob.kinds) if k != AUTONOMOUS]
    if len(times) != len(events):
        raise UsageError(f"need {len(events)} controlled switching times, got {len(times)}")
    hin = HybridInput.constant(np.full(prob.sys.control_dim(prob.q0), rc.u), tuple(zip(times, events)))
    traj = simulate(prob.sys, hin, prob.q0, prob.x0, prob.span, cfg)
    J = evaluate_cost(traj, prob.cost, hin)
    write_trajectory(traj, os.path.join(out, "trajectory.csv"))
    write_switches(traj, os.path.join(out, "switches.csv"))
    lines = [f"cost = {_fmt(J)}", f"path = {' '.join(traj.discrete_path)}"]
    lines += [f"switch {j} t = {_fmt(sw.t)}" for j, sw in enumerate(traj.switches)]
    _write(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    _plot(out, "trajectory.csv", "t", traj.segments[0].dim)
    return {"step": cfg.step}


def _cmd_hmp(rc, prob, out):
    prob = _general(prob)
    cfg = HmpConfig(tol=rc.tol or 1e-8, step=rc.step or 1e-3)
    ext = solve(prob, cfg=cfg)
    write_extremal(ext, os.path.join(out, "extremal.csv"))
    write_switches(ext.trajectory, os.path.join(out, "switches.csv"), ext.p_values)
    lines = [f"cost = {_fmt(ext.cost)}", f"residual = {ext.residual_norm:.3e}", f"iterations = {ext.iterations}"]
    for j, sw in enumerate(ext.trajectory.switches):
        lines.append(f"switch {j} t = {_fmt(sw.t)} p = {_fmt(ext.p_values.get(j, 0.0))} "
                     f"gap = {hamiltonian_gap(ext, j):.3e}")
    _write(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    _plot(out, "extremal.csv", "t", ext.trajectory.segments[0].dim, adjoint=True)
    return {"tol": cfg.tol, "step": cfg.step}


def _cmd_hdp(rc, prob, out, key):
    prob = _general(prob)
    specs = _grids(rc, prob, key)
    grids = solve_hjb(prob.sys, prob.cost, prob.q_sequence, specs, prob.span, prob.events, prob.kinds)
    lines = []
    for j, g in enumerate(grids):
        every = max(1, (len(g.t_nodes) - 1) // 100)
        export_csv(g, os.path.join(out, f"value_stage{j}.csv"), every=every)
        export_binary(g, os.path.join(out, f"value_stage{j}.bin"))
        lines.append(f"stage {j} ({g.q}): {g.values.shape[1:]} nodes, {len(g.t_nodes)} slices, "
                     f"clamped lookups {g.contamination}")
    v0 = grids[0].interpolate(prob.t0, prob.x0)
    lines.insert(0, f"V(t0, x0) = {_fmt(v0)}")
    _write(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    return {"dx": specs[0].dx, "dt": specs[0].dt, "boxes": [[s.lower, s.upper] for s in specs]}


def _cmd_riccati(rc, prob, out):
    if not isinstance(prob, LqProblem):
        raise UsageError("riccati needs an LQ problem (preset lq)")
    kw = {"tol": rc.tol} if rc.tol else {}
    sol = prob.solve(IntegratorConfig(step=rc.step or 1e-3), **kw)
    rows = sum(len(st.t) for st in sol.stages)
    write_riccati(sol, os.path.join(out, "riccati.csv"), every=max(1, rows // 4000))
    write_riccati_switches(sol, os.path.join(out, "switches.txt"))
    K0 = sol.K(prob.span[0], stage=0)
    lines = [f"K(t0) = {' '.join(_fmt(v) for v in K0.ravel())}", f"cost = {_fmt(sol.cost_value())}"]
    lines += [f"switch {j} t = {_fmt(r['t'])} p = {_fmt(r['p'])}" for j, r in enumerate(sol.switch_records)]
    _write(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    return {"tol": rc.tol, "step": rc.step or 1e-3}


def random_feedback(prob: HybridProblem, rng: np.random.Generator, scale: float = 0.3):
    """Affine feedback ``u = K x + c`` with small random entries, clipped to the control box."""
    gains = {}
    for q in prob.q_sequence:
        n, m = prob.sys.state_dims[q], prob.sys.control_dim(q)
        box = prob.sys.control_sets[q]
        gains[q] = (rng.uniform(-scale, scale, (m, n)), rng.uniform(-scale, scale, m)[:, None],
                    box.lower[:, None], box.upper[:, None])

    def control(t, q, x):
        K, c, lo, hi = gains[q]
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.minimum(np.maximum(K @ x + c[:, 0], lo[:, 0]), hi[:, 0])
        if x.ndim == 2:
            return np.minimum(np.maximum(K @ x + c, lo), hi)
        sh = (-1,) + (1,) * (x.ndim - 1)
        u = np.tensordot(K, x, axes=1) + c.reshape(sh)
        return np.clip(u, lo.reshape(sh), hi.reshape(sh))

    return control


def sensitivity_check(prob: HybridProblem, control, switch_times=(), h: float = 1e-5,
                      cfg: IntegratorConfig = IntegratorConfig(step=1e-4)):
    """Cost gradient at ``x0`` from the backward sensitivity and from central differences.

    The nominal and perturbed initial states are simulated together.
    Returns ``(gradient, finite_difference, relative_error)``.
    """
    events = [e for e, k in zip(prob.events, prob.kinds) if k != AUTONOMOUS]
    hin = HybridInput(control, tuple(zip(switch_times, events)))
    n = len(prob.x0)
    X0 = [prob.x0]
    for i in range(n):
        for sgn in (1.0, -1.0):
            x = prob.x0.copy()
            x[i] += sgn * h
            X0.append(x)
    trajs = simulate_many(prob.sys, hin, prob.q0, X0, prob.span, cfg)
    sens = propagate_sensitivity(prob.sys, prob.cost, hin, prob.q0, prob.x0, prob.span, cfg=cfg,
                                 q_sequence=prob.q_sequence, trajectory=trajs[0])
    J = [evaluate_cost(tr, prob.cost, hin) for tr in trajs[1:]]
    fd = np.array([(J[2 * i] - J[2 * i + 1]) / (2 * h) for i in range(n)])
    g = sens.initial
    return g, fd, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))


def _cmd_verify(rc, prob, out, key):
    prob = _general(prob)
    ext = solve(prob, cfg=HmpConfig(tol=rc.tol or 1e-8))
    specs = _grids(rc, prob, key)
    grids = solve_hjb(prob.sys, prob.cost, prob.q_sequence, specs, prob.span, prob.events, prob.kinds)
    rep = compare(ext, grids)
    rep.to_csv(os.path.join(out, "errors.csv"))
    rng = np.random.default_rng(rc.seed)
    ctrl_times = [sw.t for sw, k in zip(ext.trajectory.switches, prob.kinds) if k != AUTONOMOUS]
    g, fd, sens_err = sensitivity_check(prob, random_feedback(prob, rng), ctrl_times)
    gaps = [abs(hamiltonian_gap(ext, j)) for j in range(prob.n_switches)]
    lines = [rep.to_text().rstrip(),
             f"extremal cost = {_fmt(ext.cost)} residual = {ext.residual_norm:.3e}",
             f"V(t0, x0) = {_fmt(grids[0].interpolate(prob.t0, prob.x0))}",
             "hamiltonian gaps = " + " ".join(f"{v:.3e}" for v in gaps),
             f"sensitivity gradient = {' '.join(_fmt(v) for v in g)}",
             f"finite differences = {' '.join(_fmt(v) for v in fd)}",
             f"sensitivity relative error = {sens_err:.3e}",
             f"check adjoint-gradient max relative error <= 2e-2: {'PASS' if rep.max_rel <= 2e-2 else 'FAIL'}",
             f"check hamiltonian gaps <= 1e-6: {'PASS' if max(gaps, default=0.0) <= 1e-6 else 'FAIL'}",
             f"check sensitivity relative error <= 1e-3: {'PASS' if sens_err <= 1e-3 else 'FAIL'}"]
    _write(os.path.join(out, "report.txt"), "\n".join(lines) + "\n")
    _plot_errors(out, ext.trajectory.segments[0].dim)
    return {"tol": rc.tol or 1e-8, "dx": specs[0].dx, "dt": specs[0].dt}


def _cmd_oracle(rc, prob, out, key):
    prob = _general(prob)
    step = rc.step or (4e-3 if key in ("example2", "lq") else 1e-3)
    res = brute_force(prob, step=step)
    with open(os.path.join(out, "oracle_controls.csv"), "w") as fh:
        fh.write("t_start," + ",".join(f"u{i + 1}" for i in range(res.levels.shape[1])) + "\n")
        for t, u in zip(res.piece_times, res.levels):
            fh.write(f"{_fmt(t)}," + ",".join(_fmt(v) for v in u) + "\n")
    lines = [f"best cost = {_fmt(res.cost)}", f"resimulated cost = {_fmt(res.resimulated_cost)}",
             f"switch times = {' '.join(_fmt(t) for t in res.switch_times)}",
             f"candidates evaluated = {res.evaluated}", f"sweeps = {res.sweeps}",
             f"allowance = {res.allowance:.1e}"]
    _write(os.path.join(out, "oracle.txt"), "\n".join(lines) + "\n")
    return {"step": step}


def _plot(out, csv_name, xcol, n, adjoint=False):
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 't'",
             f"plot " + ", ".join(f"'{csv_name}' using 1:{4 + i} with lines" for i in range(n))]
    if adjoint:
        lines.append("pause -1")
        lines.append("plot " + ", ".join(f"'{csv_name}' using 1:{4 + n + i} with lines" for i in range(n)))
    _write(os.path.join(out, "plot.gp"), "\n".join(lines) + "\n")


def _plot_errors(out, n):
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 't'",
             f"plot 'errors.csv' using 2:{3 + 2 * n + 1} with points"]
    _write(os.path.join(out, "plot.gp"), "\n".join(lines) + "\n")


def _manifest(rc, out, key, params, extra):
    files = sorted(f for f in os.listdir(out) if f != "manifest.json")
    doc = {
        "subcommand": rc.subcommand,
        "problem": key,
        "source": rc.config or rc.preset,
        "config_hash": rc.digest(params),
        "seed": rc.seed,
        "settings": extra,
        "preset_params": params,
        "version": __version__,
        "files": {f: sha256(os.path.join(out, f)) for f in files},
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        rc = _run_config(ns)
        prob, key = _load_problem(rc)
        os.makedirs(rc.out, exist_ok=True)
        params = _params(prob)
        cmd = rc.subcommand
        if cmd == "simulate":
            extra = _cmd_simulate(rc, prob, rc.out)
        elif cmd == "hmp":
            extra = _cmd_hmp(rc, prob, rc.out)
        elif cmd == "hdp":
            extra = _cmd_hdp(rc, prob, rc.out, key)
        elif cmd == "riccati":
            extra = _cmd_riccati(rc, prob, rc.out)
        elif cmd == "verify":
            extra = _cmd_verify(rc, prob, rc.out, key)
        else:
            extra = _cmd_oracle(rc, prob, rc.out, key)
        _manifest(rc, rc.out, key, params, extra)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HybridError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {rc.out}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
