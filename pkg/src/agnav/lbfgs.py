"""Limited-memory quasi-Newton minimizer with Armijo backtracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Diverged


@dataclass
class MinimizeResult:
    x: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    status: str  # converged | cost_plateau | iteration_cap | line_search_failed


def minimize_lbfgs(
    fun,
    x0,
    *,
    memory: int = 8,
    max_iters: int = 200,
    grad_tol: float = 1e-5,
    cost_tol: float = 1e-8,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
    max_line_steps: int = 25,
    trace: list | None = None,
) -> MinimizeResult:
    """Minimize fun(x) -> (cost, grad) from x0.

    Accepted iterates are strictly decreasing in cost, so the result never
    costs more than the start.  Raises Diverged if the cost or gradient goes
    non-finite.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise Diverged("non-finite cost or gradient at the initial point")

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    status = "iteration_cap"
    iters = 0

    for iters in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if trace is not None:
            trace.append({"iteration": iters - 1, "cost": float(f), "grad_norm": gnorm})
        if gnorm < grad_tol:
            status = "converged"
            iters -= 1
            break

        d = _two_loop_direction(g, s_hist, y_hist)
        slope = float(g @ d)
        if slope >= 0:  # curvature went bad; fall back to steepest descent
            d = -g
            slope = -gnorm**2

        step = 1.0
        accepted = False
        for _ in range(max_line_steps):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo_c * step * slope:
                accepted = True
                break
            step *= shrink
        if not accepted:
            status = "line_search_failed"
            break
        if not np.all(np.isfinite(g_new)):
            raise Diverged("non-finite gradient during descent")

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)

        rel_drop = (f - f_new) / max(abs(f), 1.0)
        x, f, g = x_new, f_new, g_new
        if rel_drop < cost_tol:
            status = "cost_plateau"
            break
    return MinimizeResult(x, float(f), float(np.linalg.norm(g)), iters, status)


def _two_loop_direction(g, s_hist, y_hist):
    q = -g.copy()
    if not s_hist:
        return q
    alphas = []
    rhos = [1.0 / (y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
    q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q
