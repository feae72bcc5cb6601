"""Shared quasi-Newton maximiser for the likelihood estimators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

GTOL = 1e-6
FTOL = 1e-10
MAXITER = 500


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float                 # maximised mean log-likelihood
    grad: np.ndarray
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def _fd_hessian(grad, x, step=1e-5):
    p = x.size
    hess = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        h = step * max(1.0, abs(x[j]))
        e[j] = h
        hess[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def maximize(fun_grad, x0, gtol=GTOL, ftol=FTOL, maxiter=MAXITER, polish_steps=20):
    """Maximise a mean log-likelihood given ``fun_grad(x) -> (value, gradient)``.

    BFGS with a Wolfe line search does the bulk of the work; if the
    gradient max-norm is still above ``gtol`` a few damped Newton steps on a
    finite-difference Hessian of the analytic gradient finish the job.
    Every accepted iterate has a log-likelihood at least as large as the
    previous one; ``trace`` records them.
    """
    x0 = np.asarray(x0, dtype=float)
    cache = {}

    def neg(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            v, g = fun_grad(x)
            cache[key] = (-v, -np.asarray(g, dtype=float))
        return cache[key]

    trace = [-neg(x0)[0]]

    def callback(xk):
        trace.append(-neg(xk)[0])

    with np.errstate(all="ignore"):
        res = optimize.minimize(lambda x: neg(x)[0], x0, jac=lambda x: neg(x)[1],
                                method="BFGS", callback=callback,
                                options={"gtol": gtol, "maxiter": maxiter})
    x = np.asarray(res.x, dtype=float)
    val, g = -neg(x)[0], -neg(x)[1]
    iterations = int(res.nit)
    if not np.isfinite(val):
        return OptimResult(x, float(val), g, False, iterations, trace, "non-finite objective")

    def grad_only(y):
        return -neg(y)[1]

    steps = 0
    while np.max(np.abs(g)) > gtol and steps < polish_steps:
        steps += 1
        try:
            hess = _fd_hessian(grad_only, x)
            # g is the gradient of the maximised function; Hessian should be negative definite
            w, vecs = np.linalg.eigh(hess)
            w = np.minimum(w, -1e-8 * max(1.0, np.max(np.abs(w))))
            direction = -(vecs @ ((vecs.T @ g) / w))
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        for _ in range(30):
            cand = x + t * direction
            cval, cg = -neg(cand)[0], -neg(cand)[1]
            if np.isfinite(cval) and cval >= val:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        rel = abs(cval - val) / max(1.0, abs(val))
        x, val, g = cand, cval, cg
        trace.append(val)
        iterations += 1
        if rel <= ftol and np.max(np.abs(g)) <= gtol:
            break
    converged = bool(np.max(np.abs(g)) <= gtol) if g.size else True
    return OptimResult(x, float(val), g, converged, iterations, trace, str(res.message))
