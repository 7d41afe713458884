"""CSV and text writers for trajectories, extremals and Riccati solutions.

Numbers are written with ``repr``-exact 17 significant digits so reruns
with the same inputs produce identical files.
"""
from __future__ import annotations

import csv
import hashlib

import numpy as np

from .core import HybridTrajectory


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_trajectory(traj: HybridTrajectory, path) -> None:
    """Columns ``t, q, switch_count, x1..xn, u1..um`` on the knots (``u`` is the right limit)."""
    n = max(seg.dim for seg in traj.segments)
    m = max(seg.u0.shape[0] for seg in traj.segments)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q", "switch_count"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)])
        for i, seg in enumerate(traj.segments):
            u = _knot_controls(seg, m)
            for k, t in enumerate(seg.t):
                w.writerow([_fmt(t), seg.q, i] + [_fmt(v) for v in seg.x[:, k]] + [_fmt(v) for v in u[:, k]])


def _knot_controls(seg, m):
    if not seg.u0.shape[1]:
        return np.zeros((m, len(seg.t)))
    return np.concatenate([seg.u0, seg.u1[:, -1:]], axis=1)


def write_switches(traj: HybridTrajectory, path, p_values=None) -> None:
    """Columns ``t, kind, sigma, q_from, q_to, p, xm1..xmn, xp1..xpk`` (pre- then post-jump state)."""
    p_values = p_values or {}
    n = max((len(sw.x_minus) for sw in traj.switches), default=0)
    k = max((len(sw.x_plus) for sw in traj.switches), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "sigma", "q_from", "q_to", "p"] + [f"xm{i + 1}" for i in range(n)]
                   + [f"xp{i + 1}" for i in range(k)])
        for j, sw in enumerate(traj.switches):
            w.writerow([_fmt(sw.t), sw.kind, sw.sigma, sw.q_from, sw.q_to, _fmt(p_values.get(j, 0.0))]
                       + [_fmt(v) for v in sw.x_minus] + [_fmt(v) for v in sw.x_plus])


def write_extremal(extremal, path) -> None:
    """Columns ``t, q, switch_count, x.., lam.., u..`` on the extremal's knots."""
    traj = extremal.trajectory
    n = max(seg.dim for seg in traj.segments)
    m = max(u.shape[0] for u in extremal.controls)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q", "switch_count"] + [f"x{i + 1}" for i in range(n)] + [f"lam{i + 1}" for i in range(n)]
                   + [f"u{i + 1}" for i in range(m)])
        for i, seg in enumerate(traj.segments):
            lam, u = extremal.adjoint_segments[i], extremal.controls[i]
            for k, t in enumerate(seg.t):
                w.writerow([_fmt(t), seg.q, i] + [_fmt(v) for v in seg.x[:, k]] + [_fmt(v) for v in lam[:, k]]
                           + [_fmt(v) for v in u[:, k]])


def write_riccati(sol, path, every: int = 1) -> None:
    """Columns ``t, K11..Knn (row-major), s1..sn, G11..Gmn, stage`` with gain ``G = R^-1 B^T K``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = None
        for i, st in enumerate(sol.stages):
            n = st.K.shape[1]
            for k in range(0, len(st.t), every):
                t = float(st.t[k])
                K, s = st.K[k], st.s[k]
                G = sol.gain(t, stage=i)
                if header is None:
                    header = (["t"] + [f"K{a + 1}{b + 1}" for a in range(n) for b in range(n)]
                              + [f"s{a + 1}" for a in range(n)]
                              + [f"G{a + 1}{b + 1}" for a in range(G.shape[0]) for b in range(G.shape[1])]
                              + ["stage"])
                    w.writerow(header)
                w.writerow([_fmt(t)] + [_fmt(v) for v in K.ravel()] + [_fmt(v) for v in s]
                           + [_fmt(v) for v in G.ravel()] + [i])


def write_riccati_switches(sol, path) -> None:
    with open(path, "w") as fh:
        for j, rec in enumerate(sol.switch_records):
            fh.write(f"switch {j}\n  t = {_fmt(rec['t'])}\n  event = {rec['sigma']}\n  p = {_fmt(rec['p'])}\n")
            for key in ("K_plus", "K_minus", "s_plus", "s_minus"):
                fh.write(f"  {key} = {' '.join(_fmt(v) for v in np.ravel(rec[key]))}\n")
        fh.write(f"cost = {_fmt(sol.cost_value())}\nresidual = {_fmt(sol.residual_norm)}\n")
