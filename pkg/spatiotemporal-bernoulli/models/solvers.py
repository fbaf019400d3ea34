"""
First-order solvers shared by the estimators and the condition-number code.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from errors import ConvergenceError, DomainError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Projector = Callable[[np.ndarray], np.ndarray]
Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class SolverTrace:
    x: np.ndarray
    objective: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    residual: float = float("inf")
    iterations: int = 0
    converged: bool = False
    restarts: int = 0


def power_iteration(matrix: np.ndarray, max_iter: int = 500, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    n = matrix.shape[0]
    if n == 0 or not np.any(matrix):
        return 0.0
    v = np.ones(n) + np.linspace(0.0, 1e-3, n)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new_estimate = float(v @ w)
        v = w / norm
        if abs(new_estimate - estimate) <= tol * max(new_estimate, 1.0):
            estimate = new_estimate
            break
        estimate = new_estimate
    return float(v @ (matrix @ v))


def accelerated_projected_gradient(objective: Objective, project: Projector, x0: np.ndarray,
                                   lipschitz: Optional[float] = None, max_iter: int = 50000,
                                   grad_tol: float = 1e-7, backtracking: bool = False,
                                   restart: bool = True) -> SolverTrace:
    """
    Accelerated projected gradient (FISTA) with function-value restart.

    With restart on, a step that would increase the objective is rejected and
    the momentum is reset, so accepted iterates are monotone. With backtracking
    the local constant L doubles until the quadratic upper model holds; domain
    errors raised by the objective count as failed trials. Stops once the
    gradient-mapping norm L * ||x - P(x - grad/L)|| at an accepted point is at
    most grad_tol.
    """
    L = float(lipschitz) if lipschitz else 1.0
    if L <= 0.0:
        L = 1.0
    x = project(np.asarray(x0, dtype=float))
    f_x, g_x = objective(x)
    trace = SolverTrace(x=x, objective=[f_x])
    y, f_y, g_y = x, f_x, g_x
    t = 1.0

    for it in range(1, max_iter + 1):
        if backtracking:
            L *= 0.9
        while True:
            z = project(y - g_y / L)
            try:
                f_z, g_z = objective(z)
            except DomainError:
                if not backtracking:
                    raise
                L *= 2.0
                continue
            if not backtracking:
                break
            step = z - y
            model = f_y + float(g_y @ step) + 0.5 * L * float(step @ step)
            if f_z <= model + 1e-12 * max(1.0, abs(f_y)):
                break
            L *= 2.0
        mapping = L * float(np.linalg.norm(z - y))
        trace.iterations = it

        if restart and f_z > f_x and y is not x:
            trace.restarts += 1
            y, f_y, g_y, t = x, f_x, g_x, 1.0
            continue

        x_prev = x
        x, f_x, g_x = z, f_z, g_z
        trace.objective.append(f_x)
        trace.residuals.append(mapping)

        if mapping <= grad_tol:
            if y is x_prev:
                residual = mapping
            else:
                residual = L * float(np.linalg.norm(x - project(x - g_x / L)))
            if residual <= grad_tol:
                trace.x, trace.residual, trace.converged = x, residual, True
                return trace

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        try:
            f_y, g_y = objective(y)
        except DomainError:
            trace.restarts += 1
            y, f_y, g_y, t = x, f_x, g_x, 1.0

    trace.x = x
    trace.residual = L * float(np.linalg.norm(x - project(x - g_x / L)))
    trace.converged = trace.residual <= grad_tol
    logger.warning("Accelerated gradient stopped after %d iterations (residual %.3e)", max_iter, trace.residual)
    return trace


def probe_lipschitz(fld: Field, x: np.ndarray, probes: int = 5, scale: float = 1e-3, seed: int = 0) -> float:
    """Estimate the field's Lipschitz constant from a few random differences."""
    rng = np.random.default_rng(seed)
    base = fld(x)
    best = 0.0
    for _ in range(probes):
        delta = rng.standard_normal(x.size)
        delta *= scale / max(np.linalg.norm(delta), 1e-300)
        best = max(best, float(np.linalg.norm(fld(x + delta) - base)) / scale)
    return best if best > 0.0 else 1.0


def extragradient(fld: Field, project: Projector, x0: np.ndarray, gamma: float,
                  max_iter: int = 50000, tol: float = 1e-7, nu: float = 0.9,
                  max_halvings: int = 60) -> SolverTrace:
    """
    Projected extragradient for monotone variational inequalities.

    The step halves whenever gamma * ||F(y) - F(x)|| > nu * ||y - x||. Stops
    when the natural residual ||x - P(x - gamma F(x))|| / gamma <= tol.
    """
    x = project(np.asarray(x0, dtype=float))
    trace = SolverTrace(x=x)
    for it in range(1, max_iter + 1):
        f_x = fld(x)
        for _ in range(max_halvings):
            y = project(x - gamma * f_x)
            f_y = fld(y)
            gap = float(np.linalg.norm(y - x))
            if gamma * float(np.linalg.norm(f_y - f_x)) <= nu * gap or gap == 0.0:
                break
            gamma *= 0.5
        else:
            raise ConvergenceError(
                f"Extragradient step search failed at iteration {it} (gamma={gamma:.3e})",
                iterate=x, residual=trace.residual,
            )
        residual = gap / gamma
        trace.residuals.append(residual)
        trace.residual = residual
        trace.iterations = it
        if residual <= tol:
            trace.x, trace.converged = x, True
            return trace
        x = project(x - gamma * f_y)
    trace.x = x
    logger.warning("Extragradient stopped after %d iterations (residual %.3e)", max_iter, trace.residual)
    return trace
