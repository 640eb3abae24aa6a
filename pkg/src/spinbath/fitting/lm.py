"""Box-constrained Levenberg-Marquardt least squares."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..domain import DomainError, FitResult

__all__ = ["Objective", "Tolerances", "least_squares", "multistart", "numerical_jacobian"]


@dataclass
class Objective:
    """Residual map with parameter names, optional box bounds and scale hints."""

    residuals: Callable[[np.ndarray], np.ndarray]
    names: Sequence[str]
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    x_scale: Optional[Sequence[float]] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    absolute_sigma: bool = False
    residual_floor: float = 0.0  # smallest credible residual std, e.g. rounding noise

    def __post_init__(self):
        n = len(self.names)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise DomainError("bounds must have one entry per parameter")
        if np.any(self.lower > self.upper):
            raise DomainError("lower bounds exceed upper bounds")
        if self.x_scale is not None:
            self.x_scale = np.asarray(self.x_scale, float)


@dataclass(frozen=True)
class Tolerances:
    grad: float = 1e-8  # max cosine between residual and a Jacobian column
    step: float = 1e-10  # relative step in scaled coordinates
    max_iter: int = 200
    atol: float = 1e-13  # residual norm treated as exactly zero


def numerical_jacobian(fun, x, r0, lower, upper, scale) -> np.ndarray:
    """Central differences, falling back to one-sided steps at the bounds."""
    m, n = r0.size, x.size
    jac = np.empty((m, n))
    for j in range(n):
        h = 6e-6 * max(abs(x[j]), scale[j])
        up, dn = x.copy(), x.copy()
        up[j] = x[j] + h
        dn[j] = x[j] - h
        if up[j] > upper[j] and dn[j] >= lower[j]:
            jac[:, j] = (r0 - fun(dn)) / h
        elif dn[j] < lower[j] and up[j] <= upper[j]:
            jac[:, j] = (fun(up) - r0) / h
        else:
            jac[:, j] = (fun(up) - fun(dn)) / (2 * h)
    return jac


def _covariance(jac: np.ndarray, s2: float) -> tuple[np.ndarray, np.ndarray]:
    n = jac.shape[1]
    norms = np.linalg.norm(jac, axis=0)
    alive = norms > 0
    cov = np.full((n, n), np.inf)
    if not np.any(alive):
        return cov, np.full(n, np.inf)
    js = jac[:, alive] / norms[alive]
    w, v = np.linalg.eigh(js.T @ js)
    null = w <= 1e-12 * max(w.max(), 1e-300)
    inv = (v[:, ~null] / w[~null]) @ v[:, ~null].T
    sub = inv / np.outer(norms[alive], norms[alive]) * s2
    idx = np.flatnonzero(alive)
    cov[np.ix_(idx, idx)] = sub
    stderr = np.full(n, np.inf)
    stderr[idx] = np.sqrt(np.clip(np.diag(sub), 0, None))
    if np.any(null):
        touched = np.any(np.abs(v[:, null]) > 1e-6, axis=1)
        stderr[idx[touched]] = np.inf
    return cov, stderr


def least_squares(obj: Objective, init: Sequence[float], tol: Tolerances = Tolerances()) -> FitResult:
    """Minimise ``sum(obj.residuals(x)**2)`` within the box bounds.

    Each iteration first tries the undamped Gauss-Newton step and raises the
    Marquardt damping only when that fails to reduce the cost. Parameters
    pinned at a bound by the gradient are frozen for the step. ``converged`` is
    set only when both the gradient test and the step test pass.
    """
    x = np.array(init, dtype=float)
    n = x.size
    if n != len(obj.names):
        raise DomainError("init must have one entry per parameter")
    if np.any(x < obj.lower) or np.any(x > obj.upper):
        raise DomainError("initial parameters lie outside the bounds")
    fun = lambda p: np.asarray(obj.residuals(p), dtype=float)
    r = fun(x)
    if r.size < n:
        raise DomainError("fewer residuals than parameters")
    if not np.all(np.isfinite(r)):
        raise DomainError("residuals are not finite at the initial point")
    scale = obj.x_scale if obj.x_scale is not None else np.where(np.abs(x) > 0, np.abs(x), 1.0)
    scale = np.where(scale > 0, scale, 1.0)
    cost = float(r @ r)
    lam = 0.0
    converged = False
    message = "iteration limit reached"
    grad_measure = math.inf
    n_steps = 0
    jac = None
    for _ in range(tol.max_iter):
        jac = obj.jacobian(x) if obj.jacobian is not None else numerical_jacobian(fun, x, r, obj.lower, obj.upper, scale)
        g = jac.T @ r
        at_lo = (x <= obj.lower) & (g > 0)
        at_hi = (x >= obj.upper) & (g < 0)
        free = ~(at_lo | at_hi)
        col = np.linalg.norm(jac, axis=0)
        rnorm = math.sqrt(cost)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(col > 0, np.abs(g) / (col * max(rnorm, tol.atol)), 0.0)
        grad_measure = float(np.max(cosines[free], initial=0.0)) if rnorm > tol.atol else 0.0
        js = jac[:, free] * scale[free]
        jtj_diag = np.sum(js * js, axis=0)
        accepted = False
        while True:
            if lam > 0:
                damp = np.sqrt(lam * np.maximum(jtj_diag, 1e-12 * max(jtj_diag.max(initial=0), 1e-300)))
                a = np.vstack([js, np.diag(damp)])
                b = np.concatenate([-r, np.zeros(damp.size)])
            else:
                a, b = js, -r
            dz = np.linalg.lstsq(a, b, rcond=None)[0]
            step = np.zeros(n)
            step[free] = dz * scale[free]
            rel_step = float(np.linalg.norm(dz) / (np.linalg.norm(x / scale) + tol.step))
            if grad_measure <= tol.grad and rel_step <= tol.step:
                converged = True
                message = "converged"
                break
            x_new = np.clip(x + step, obj.lower, obj.upper)
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                lam = 0.0 if lam < 1e-10 else lam / 10.0
                accepted = True
                n_steps += 1
                break
            lam = 1e-4 if lam == 0 else lam * 10.0
            if lam > 1e16:
                break
        if converged:
            break
        if not accepted:
            if grad_measure <= tol.grad:
                converged = True
                message = "converged (no further decrease possible)"
            else:
                message = "stalled: damping exhausted without progress"
            break
    if jac is None or not converged:
        jac = numerical_jacobian(fun, x, r, obj.lower, obj.upper, scale)
    m = r.size
    if obj.absolute_sigma:
        s2 = 1.0
    else:
        s2 = cost / (m - n) if m > n else 0.0
    s2 = max(s2, obj.residual_floor**2)
    cov, stderr = _covariance(jac, s2)
    gtol = tol.grad if converged else math.inf
    return FitResult(
        params=dict(zip(obj.names, map(float, x))),
        stderr=dict(zip(obj.names, map(float, stderr))),
        residual_norm=cost,
        converged=converged,
        iterations=n_steps,
        grad_norm=grad_measure,
        gtol=gtol,
        message=message,
        covariance=cov,
    )


def multistart(obj: Objective, inits: Sequence[Sequence[float]], tol: Tolerances = Tolerances()) -> FitResult:
    """Run :func:`least_squares` from each start (at most 8) and keep the best.

    Converged results are preferred over lower-cost unconverged ones.
    """
    if not 1 <= len(inits) <= 8:
        raise DomainError("multistart takes between 1 and 8 starting points")
    best = None
    for init in inits:
        res = least_squares(obj, init, tol)
        key = (not res.converged, res.residual_norm)
        if best is None or key < best[0]:
            best = (key, res)
    return best[1]
