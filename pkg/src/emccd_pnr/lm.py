"""Small deterministic Levenberg-Marquardt least-squares minimizer.

Damping starts at 1e-3, is multiplied by 10 on a rejected step and divided
by 10 on an accepted one; convergence is declared when the relative change
of the objective drops below the tolerance.  The Jacobian is forward-difference
unless supplied.  Deliberately minimal: the fitting problems in this package
have a handful of parameters and smooth residuals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["LMResult", "NonConvergenceError", "levenberg_marquardt"]


class NonConvergenceError(RuntimeError):
    """A fit failed to converge (iteration budget or singular Jacobian)."""

    def __init__(self, message: str, result: "LMResult | None" = None):
        super().__init__(message)
        self.result = result


@dataclass
class LMResult:
    x: np.ndarray
    objective: float
    residuals: np.ndarray
    jacobian: np.ndarray
    covariance: np.ndarray | None
    converged: bool
    n_iter: int
    message: str
    objective_path: list[float] = field(default_factory=list)


def _finite_difference_jacobian(fun, x, r0, rel_step):
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xp = x.copy()
        xp[i] += h
        jac[:, i] = (fun(xp) - r0) / h
    return jac


def levenberg_marquardt(
    fun,
    x0,
    jac=None,
    max_iter: int = 200,
    damping: float = 1e-3,
    tol: float = 1e-8,
    rel_step: float = 1e-6,
) -> LMResult:
    """Minimize ``sum(fun(x)**2)`` starting from ``x0``.

    Raises :class:`NonConvergenceError` when the Jacobian becomes singular or
    the iteration budget is exhausted; the partial result rides on the
    exception.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    r = np.asarray(fun(x), dtype=np.float64)
    obj = float(r @ r)
    path = [obj]
    lam = damping
    message = "iteration budget exhausted"
    converged = False
    n_iter = 0
    jacobian = None

    for n_iter in range(1, max_iter + 1):
        jacobian = (
            np.asarray(jac(x), dtype=np.float64)
            if jac is not None
            else _finite_difference_jacobian(fun, x, r, rel_step)
        )
        jtj = jacobian.T @ jacobian
        grad = jacobian.T @ r
        diag = np.diag(jtj).copy()
        if not np.all(np.isfinite(jtj)) or np.all(diag == 0.0):
            raise NonConvergenceError(
                "singular jacobian",
                _make_result(x, r, obj, jacobian, False, n_iter, "singular jacobian", path),
            )
        diag[diag == 0.0] = diag[diag > 0.0].min()

        accepted = False
        while lam < 1e14:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                raise NonConvergenceError(
                    "singular jacobian",
                    _make_result(
                        x, r, obj, jacobian, False, n_iter, "singular jacobian", path
                    ),
                ) from None
            r_trial = np.asarray(fun(x + step), dtype=np.float64)
            obj_trial = float(r_trial @ r_trial)
            if np.isfinite(obj_trial) and obj_trial < obj:
                rel_change = (obj - obj_trial) / max(obj, 1e-300)
                x = x + step
                r = r_trial
                obj = obj_trial
                path.append(obj)
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                if rel_change < tol:
                    converged = True
                    message = "relative objective change below tolerance"
                break
            # a finite rejected step that cannot improve the objective by more
            # than the tolerance means we sit at a numerical minimum
            if np.isfinite(obj_trial) and abs(obj_trial - obj) <= tol * max(obj, 1e-300):
                converged = True
                message = "no improving step (at minimum)"
                break
            lam *= 10.0
        else:
            converged = True
            message = "damping saturated (at minimum)"
        if converged:
            break
        if not accepted:
            break

    result = _make_result(x, r, obj, jacobian, converged, n_iter, message, path)
    if not converged:
        raise NonConvergenceError(message, result)
    return result


def _make_result(x, r, obj, jacobian, converged, n_iter, message, path) -> LMResult:
    covariance = None
    if jacobian is not None and r.size > x.size:
        try:
            jtj_inv = np.linalg.inv(jacobian.T @ jacobian)
            covariance = jtj_inv * obj / (r.size - x.size)
        except np.linalg.LinAlgError:
            covariance = None
    return LMResult(
        x=x,
        objective=obj,
        residuals=r,
        jacobian=jacobian if jacobian is not None else np.empty((r.size, x.size)),
        covariance=covariance,
        converged=converged,
        n_iter=n_iter,
        message=message,
        objective_path=path,
    )
