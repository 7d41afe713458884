"""Comparison of the adjoint of an extremal with the gradient of a tabulated value."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .hdp import GridError, ValueGrid, value_gradient, BIG
from .hmp import HmpExtremal


@dataclass
class SegmentComparison:
    q: str
    times: np.ndarray
    adjoint: np.ndarray  # (n, K)
    gradient: np.ndarray  # (n, K)
    error: np.ndarray  # (K,) max-norm of adjoint - gradient
    max_rel: float
    median_rel: float


@dataclass
class SwitchComparison:
    """Jump relation ``v- = xi_x^T v+ + p grad m + grad c`` evaluated with the
    value gradients and with the adjoint; ``mismatch`` is the difference of
    the two residuals."""

    t: float
    p: float
    gradient_residual: np.ndarray
    adjoint_residual: np.ndarray
    mismatch: float


@dataclass
class EquivalenceReport:
    segments: list
    switches: list
    dx: tuple
    dt: float
    coverage: float
    scale: float
    skipped: list = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        vals = [s.max_rel for s in self.segments if len(s.times)]
        return max(vals) if vals else float("nan")

    @property
    def median_rel(self) -> float:
        errs = np.concatenate([s.error for s in self.segments]) if self.segments else np.array([])
        return float(np.median(errs) / self.scale) if errs.size else float("nan")

    def to_text(self) -> str:
        lines = [f"grid dx={', '.join(f'{v:.4g}' for v in self.dx)} dt={self.dt:.4g} coverage={self.coverage:.3f}",
                 f"max relative error {self.max_rel:.6e}", f"median relative error {self.median_rel:.6e}"]
        for i, s in enumerate(self.segments):
            lines.append(f"segment {i} ({s.q}): {len(s.times)} samples, max rel {s.max_rel:.6e}, "
                         f"median rel {s.median_rel:.6e}")
        for j, sw in enumerate(self.switches):
            lines.append(f"switch {j} at t={sw.t:.10g} p={sw.p:.6g}: boundary mismatch {sw.mismatch:.6e}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = max(s.adjoint.shape[0] for s in self.segments)
            w.writerow(["segment", "t"] + [f"lam{i + 1}" for i in range(n)] + [f"dV{i + 1}" for i in range(n)]
                       + ["error", "rel_error"])
            for i, s in enumerate(self.segments):
                for k, t in enumerate(s.times):
                    w.writerow([i, f"{t:.12g}"] + [f"{v:.12g}" for v in s.adjoint[:, k]]
                               + [f"{v:.12g}" for v in s.gradient[:, k]]
                               + [f"{s.error[k]:.6e}", f"{s.error[k] / self.scale:.6e}"])


def compare(extremal: HmpExtremal, grids: list, margin: float = None) -> EquivalenceReport:
    """Sample ``grad V`` along the extremal on the grid's time slices and pair it with ``lam``.

    Slices within ``margin`` (default one time step) of a switch are
    skipped, as is the final slice.  Points where the trajectory is not
    interior to the grid, or the value is at the infeasibility level, are
    recorded in ``skipped`` and lower the coverage.
    """
    traj = extremal.trajectory
    prob = extremal.problem
    g0 = grids[0]
    dt = g0.dt
    margin = dt if margin is None else margin
    sw_times = [sw.t for sw in traj.switches]
    lam_scale = max(float(np.max(np.abs(lam))) for lam in extremal.adjoint_segments)
    scale = max(lam_scale, 1e-6)

    per_seg = [[] for _ in traj.segments]
    skipped = []
    total = 0
    for t in g0.t_nodes:
        if any(abs(t - ts) <= margin + 1e-12 for ts in sw_times) or t >= traj.tf - 1e-12:
            continue
        i = traj.segment_index(t)
        total += 1
        x = traj.state(t)
        grid = grids[i]
        try:
            g = value_gradient(grid, t, x)
        except GridError:
            skipped.append(t)
            continue
        if grid.interpolate(t, x) >= BIG / 2:
            skipped.append(t)
            continue
        per_seg[i].append((t, extremal.adjoint(t), g))

    segments = []
    for i, rows in enumerate(per_seg):
        q = traj.segments[i].q
        if not rows:
            n = traj.segments[i].dim
            segments.append(SegmentComparison(q, np.array([]), np.zeros((n, 0)), np.zeros((n, 0)), np.array([]),
                                              float("nan"), float("nan")))
            continue
        times = np.array([r[0] for r in rows])
        lam = np.stack([r[1] for r in rows], axis=1)
        grad = np.stack([r[2] for r in rows], axis=1)
        err = np.max(np.abs(lam - grad), axis=0)
        segments.append(SegmentComparison(q, times, lam, grad, err, float(err.max() / scale),
                                          float(np.median(err) / scale)))

    switches = []
    for j, sw in enumerate(traj.switches):
        p = extremal.p_values.get(j, 0.0)
        switches.append(_switch_mismatch(prob, sw, p, grids[j], grids[j + 1], extremal, j))
    coverage = 1.0 - len(skipped) / total if total else 0.0
    return EquivalenceReport(segments, switches, tuple(float(v) for v in g0.dx), dt, coverage, scale, skipped)


def _switch_mismatch(prob, sw, p, grid_minus: ValueGrid, grid_plus: ValueGrid, extremal, j):
    sys, cost = prob.sys, prob.cost
    xi_x = np.atleast_2d(sys.jump_map(sw.sigma).jac(sw.x_minus))
    gc = np.asarray(cost.switch_grad(sw.sigma, sw.x_minus), dtype=float)
    gm = np.zeros(len(sw.x_minus))
    if (sw.q_from, sw.q_to) in sys.manifolds:
        gm = np.asarray(sys.manifolds[(sw.q_from, sw.q_to)].gradient(sw.x_minus), dtype=float)
    dt = grid_minus.dt
    # one-sided slices: last slice before and first slice after the switch
    t_before = grid_minus.t_nodes[max(0, int(np.floor((sw.t - grid_minus.t_nodes[0]) / dt)))]
    t_after = grid_plus.t_nodes[min(len(grid_plus.t_nodes) - 1, int(np.ceil((sw.t - grid_plus.t_nodes[0]) / dt)))]
    try:
        v_minus = value_gradient(grid_minus, t_before, sw.x_minus)
        v_plus = value_gradient(grid_plus, t_after, sw.x_plus)
        g_res = v_minus - (xi_x.T @ v_plus + p * gm + gc)
    except GridError:
        g_res = np.full(len(sw.x_minus), np.nan)
    lam_minus = extremal.adjoint_segments[j][:, -1]
    lam_plus = extremal.adjoint_segments[j + 1][:, 0]
    a_res = lam_minus - (xi_x.T @ lam_plus + p * gm + gc)
    return SwitchComparison(sw.t, float(p), g_res, a_res, float(np.max(np.abs(g_res - a_res))))
