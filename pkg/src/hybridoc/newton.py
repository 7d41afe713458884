"""Damped Newton iteration with a forward-difference Jacobian.

The residual function works on batches: ``fun(Z)`` maps ``(P, B)`` to
``(R, B)``, so all Jacobian columns and all line-search trial points of
one iteration are evaluated in a single call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import HybridError


class NewtonError(HybridError):
    def __init__(self, msg, best_z=None, best_residual=np.inf):
        super().__init__(f"{msg} (best residual {best_residual:.3e})")
        self.best_z = best_z
        self.best_residual = best_residual


class SingularJacobianError(NewtonError):
    pass


@dataclass
class NewtonResult:
    z: np.ndarray
    residual: np.ndarray
    iterations: int
    history: list = field(default_factory=list)

    @property
    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.residual)))


STEP_FRACTIONS = 0.5 ** np.arange(8)


def newton(fun, z0, tol=1e-8, max_iter=100, fd_step=1e-6, cond_limit=1e13) -> NewtonResult:
    z = np.array(z0, dtype=float)
    P = z.size
    r = fun(z[:, None])[:, 0]
    history = [float(np.max(np.abs(r)))]
    best = (history[0], z.copy())
    for it in range(max_iter):
        if history[-1] <= tol:
            return NewtonResult(z, r, it, history)
        d = fd_step * np.maximum(1.0, np.abs(z))
        Z = z[:, None] + np.diag(d)
        R = fun(Z)
        Jac = (R - r[:, None]) / d[None, :]
        if not np.all(np.isfinite(Jac)):
            raise NewtonError("non-finite Jacobian", best[1], best[0])
        try:
            cond = np.linalg.cond(Jac)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not cond < cond_limit:
            raise SingularJacobianError(
                f"singular shooting Jacobian (condition {cond:.2e}); try another initial guess", best[1], best[0]
            )
        dz = np.linalg.solve(Jac, -r) if Jac.shape[0] == P else np.linalg.lstsq(Jac, -r, rcond=None)[0]
        r0 = np.linalg.norm(r)
        # full step first, the backtracking fractions only when it fails
        trial = z[:, None] + dz[:, None]
        Rt = fun(trial)
        norms = np.linalg.norm(Rt, axis=0)
        if not norms[0] <= (1.0 - 1e-4) * r0:
            trial = z[:, None] + dz[:, None] * STEP_FRACTIONS[None, :]
            Rt = fun(trial)
            norms = np.linalg.norm(Rt, axis=0)
        norms[~np.isfinite(norms)] = np.inf
        fr = STEP_FRACTIONS[:len(norms)]
        ok = np.nonzero(norms <= (1.0 - 1e-4 * fr) * r0)[0]
        pick = int(ok[0]) if len(ok) else int(np.argmin(norms))
        if not np.isfinite(norms[pick]):
            raise NewtonError("line search produced only non-finite residuals", best[1], best[0])
        z = trial[:, pick].copy()
        r = Rt[:, pick].copy()
        history.append(float(np.max(np.abs(r))))
        if history[-1] < best[0]:
            best = (history[-1], z.copy())
    if history[-1] <= tol:
        return NewtonResult(z, r, max_iter, history)
    raise NewtonError(f"Newton did not converge in {max_iter} iterations", best[1], best[0])
