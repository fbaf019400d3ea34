"""
Constrained estimation of process parameters: least squares, maximum
likelihood (linear and logistic links) and variational-inequality solutions
for nonlinear links.

Every objective separates over locations, so each location block is solved on
its own and the blocks are concatenated in location order.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np
from joblib import Parallel, delayed

from errors import DomainError, InitializationError
from models.constraints import FeasibleSet
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector
from models.solvers import (
    SolverTrace,
    accelerated_projected_gradient,
    extragradient,
    power_iteration,
    probe_lipschitz,
)
from models.stats import (
    Design,
    SuffStats,
    accumulate,
    block_field,
    block_logistic,
    block_ls,
    block_ml,
    build_design,
)

logger = logging.getLogger(__name__)

DEFAULT_RHO = 1e-4


class StepRule(str, Enum):
    BACKTRACKING_ARMIJO = "backtracking"
    FIXED_LIPSCHITZ = "fixed"


@dataclass(frozen=True)
class SolveOptions:
    max_iter: int = 50000
    grad_tol: Optional[float] = None
    step_rule: StepRule = StepRule.FIXED_LIPSCHITZ
    restart: bool = True
    n_jobs: int = 1
    projection_tol: float = 1e-8
    projection_max_iter: int = 10000

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.grad_tol is not None and self.grad_tol <= 0:
            raise ValueError(f"grad_tol must be positive, got {self.grad_tol}")
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))

    def tolerance(self, stats: SuffStats) -> float:
        if self.grad_tol is not None:
            return self.grad_tol
        return 1e-7 * (1.0 + float(np.max(np.abs(stats.moments), initial=0.0)))


@dataclass
class EstimateResult:
    beta_hat: ParamVector
    objective_trace: List[float]
    residual: float
    iterations: int
    block_converged: List[bool]
    block_degenerate: List[bool] = field(default_factory=list)
    method: str = "ls"

    @property
    def converged(self) -> bool:
        return all(self.block_converged)


def _combine(spec: ModelSpec, traces: List[SolverTrace], method: str,
             degenerate: Optional[List[bool]] = None) -> EstimateResult:
    values = np.concatenate([tr.x for tr in traces])
    longest = max((len(tr.objective) for tr in traces), default=0)
    combined = np.zeros(longest)
    for tr in traces:
        if tr.objective:
            padded = np.full(longest, tr.objective[-1])
            padded[:len(tr.objective)] = tr.objective
            combined += padded
    result = EstimateResult(
        beta_hat=ParamVector(spec, values),
        objective_trace=combined.tolist(),
        residual=max((tr.residual for tr in traces), default=0.0),
        iterations=max((tr.iterations for tr in traces), default=0),
        block_converged=[tr.converged for tr in traces],
        block_degenerate=degenerate or [False] * len(traces),
        method=method,
    )
    if not result.converged:
        logger.warning("%s estimate not converged in %d blocks (residual %.3e)",
                       method.upper(), result.block_converged.count(False), result.residual)
    return result


def _block_projector(feasible_set: FeasibleSet, k: int, options: SolveOptions) -> Callable[[np.ndarray], np.ndarray]:
    def project(x):
        return feasible_set.project_block(k, x, tol=options.projection_tol, max_iter=options.projection_max_iter)
    return project


def _check_inputs(panel: EventPanel, spec: ModelSpec, feasible_set: FeasibleSet):
    if panel.spec != spec or feasible_set.spec != spec:
        raise ValueError(f"Spec mismatch: panel {panel.spec}, set {feasible_set.spec}, requested {spec}")


def _degenerate_blocks(stats: SuffStats, feasible_set: FeasibleSet, L: float) -> List[bool]:
    flags = []
    for block in stats.gram_blocks(feasible_set.free_mask()):
        if block.size == 0:
            flags.append(True)
            continue
        flags.append(bool(np.linalg.eigvalsh(block)[0] <= 1e-12 * max(L, 1.0)))
    return flags


def _solve_ls_block(stats: SuffStats, feasible_set: FeasibleSet, k: int, L: float,
                    options: SolveOptions, tol: float) -> SolverTrace:
    project = _block_projector(feasible_set, k, options)
    x0 = stats.moments[k].reshape(-1)
    return accelerated_projected_gradient(
        lambda x: block_ls(stats, k, x), project, x0,
        lipschitz=None if options.step_rule is StepRule.BACKTRACKING_ARMIJO else L,
        max_iter=options.max_iter, grad_tol=tol,
        backtracking=options.step_rule is StepRule.BACKTRACKING_ARMIJO,
        restart=options.restart,
    )


def estimate_ls(panel: EventPanel, spec: ModelSpec, feasible_set: FeasibleSet,
                options: Optional[SolveOptions] = None, stats: Optional[SuffStats] = None,
                decompose: bool = True) -> EstimateResult:
    """
    Least-squares estimate over the feasible set.

    Args:
        panel: observed panel
        spec: model spec (must match panel and set)
        feasible_set: constraint set
        options: solver options
        stats: precomputed sufficient statistics
        decompose: solve location blocks independently (default) or jointly

    Returns:
        EstimateResult with the combined objective trace
    """
    _check_inputs(panel, spec, feasible_set)
    options = options or SolveOptions()
    stats = stats or accumulate(panel, spec)
    tol = options.tolerance(stats)
    L = power_iteration(stats.gram)
    degenerate = _degenerate_blocks(stats, feasible_set, L)
    if any(degenerate):
        logger.info("Gram restricted to free slots is singular for %d location(s)", sum(degenerate))

    if not decompose:
        def objective(x):
            blocks = x.reshape(spec.K, -1)
            parts = [block_ls(stats, k, blocks[k]) for k in range(spec.K)]
            return sum(p[0] for p in parts), np.concatenate([p[1] for p in parts])

        def project(x):
            return feasible_set.project(x, tol=options.projection_tol, max_iter=options.projection_max_iter)

        trace = accelerated_projected_gradient(
            objective, project, stats.moment_vector(), lipschitz=L, max_iter=options.max_iter,
            grad_tol=tol, backtracking=options.step_rule is StepRule.BACKTRACKING_ARMIJO,
            restart=options.restart,
        )
        return _combine(spec, [trace], "ls", [any(degenerate)])

    traces = Parallel(n_jobs=options.n_jobs)(
        delayed(_solve_ls_block)(stats, feasible_set, k, L, options, tol) for k in range(spec.K)
    )
    return _combine(spec, traces, "ls", degenerate)


def _uniform_block(spec: ModelSpec) -> np.ndarray:
    block = np.zeros((spec.n_features, spec.M))
    block[0, :] = 1.0 / (spec.M + 1)
    return block.reshape(-1)


def _interior_start(design: Design, feasible_set: FeasibleSet, k: int, x_ls: np.ndarray,
                    guard: float, options: SolveOptions) -> np.ndarray:
    """Shrink the LS block toward the uniform point until the likelihood is defined."""
    project = _block_projector(feasible_set, k, options)
    anchor = project(x_ls)
    uniform = _uniform_block(feasible_set.spec)
    for tau in (0.0, 1e-3, 1e-2, 1e-1, 0.5, 1.0):
        candidate = (1.0 - tau) * anchor + tau * uniform
        if not feasible_set.block_feasible(k, candidate, options.projection_tol):
            continue
        try:
            block_ml(design, k, candidate, guard)
        except DomainError:
            continue
        return candidate
    raise InitializationError(f"No strictly feasible likelihood start for location {k + 1}")


def _solve_ml_block(design: Design, feasible_set: FeasibleSet, k: int, x0: np.ndarray, guard: float,
                    options: SolveOptions, tol: float, L0: float) -> SolverTrace:
    return accelerated_projected_gradient(
        lambda x: block_ml(design, k, x, guard), _block_projector(feasible_set, k, options), x0,
        lipschitz=L0, max_iter=options.max_iter, grad_tol=tol, backtracking=True, restart=options.restart,
    )


def estimate_ml(panel: EventPanel, spec: ModelSpec, set_with_rho: FeasibleSet,
                options: Optional[SolveOptions] = None, ls_result: Optional[EstimateResult] = None,
                design: Optional[Design] = None) -> EstimateResult:
    """Maximum-likelihood estimate for the linear link over the rho-strengthened set."""
    _check_inputs(panel, spec, set_with_rho)
    if spec.link is not LinkFunction.IDENTITY:
        raise ValueError(
            f"Likelihood for link '{spec.link.value}' is not convex in general; "
            "use estimate_ml_logistic for the logistic link"
        )
    rho = set_with_rho.rho
    if rho is None or rho <= 0.0:
        raise InitializationError("Maximum likelihood needs a BasicPolytope atom with rho > 0")
    options = options or SolveOptions()
    design = design or build_design(panel)
    stats = accumulate(panel, spec, design=design)
    tol = options.tolerance(stats)
    if ls_result is None:
        ls_result = estimate_ls(panel, spec, set_with_rho, options, stats=stats)
    # likelihood guard at half margin; projections are accurate to ~1e-10
    guard = 0.5 * rho
    ls_blocks = ls_result.beta_hat.values.reshape(spec.K, -1)
    starts = [_interior_start(design, set_with_rho, k, ls_blocks[k], guard, options) for k in range(spec.K)]
    L0 = power_iteration(stats.gram)
    traces = Parallel(n_jobs=options.n_jobs)(
        delayed(_solve_ml_block)(design, set_with_rho, k, starts[k], guard, options, tol, L0)
        for k in range(spec.K)
    )
    return _combine(spec, traces, "ml")


def estimate_vi(panel: EventPanel, spec: ModelSpec, link: LinkFunction, feasible_set: FeasibleSet,
                options: Optional[SolveOptions] = None, design: Optional[Design] = None) -> EstimateResult:
    """
    Weak solution of the variational inequality with the empirical field of a
    nonlinear link, by projected extragradient. Identity delegates to LS.
    """
    link = LinkFunction(link)
    if link is LinkFunction.IDENTITY:
        return estimate_ls(panel, spec, feasible_set, options)
    _check_inputs(panel, spec, feasible_set)
    if link is LinkFunction.SIGMOID and spec.M != 1:
        raise ValueError(f"Sigmoid link requires M=1, got M={spec.M}")
    options = options or SolveOptions()
    design = design or build_design(panel)
    tol = options.tolerance(accumulate(panel, spec, design=design))

    def solve(k: int) -> SolverTrace:
        project = _block_projector(feasible_set, k, options)
        x0 = project(np.zeros(spec.block_size))

        def fld(x):
            return block_field(design, k, x, link)

        gamma = 1.0 / probe_lipschitz(fld, x0, seed=k)
        return extragradient(fld, project, x0, gamma, max_iter=options.max_iter, tol=tol)

    traces = Parallel(n_jobs=options.n_jobs)(delayed(solve)(k) for k in range(spec.K))
    return _combine(spec, traces, f"vi-{link.value}")


def estimate_ml_logistic(panel: EventPanel, spec: ModelSpec, feasible_set: FeasibleSet,
                         options: Optional[SolveOptions] = None,
                         design: Optional[Design] = None) -> EstimateResult:
    """Logistic maximum likelihood (ground score pinned at zero)."""
    _check_inputs(panel, spec, feasible_set)
    options = options or SolveOptions()
    design = design or build_design(panel)
    stats = accumulate(panel, spec, design=design)
    tol = options.tolerance(stats)
    # softmax Hessian is bounded by half the Gram
    L0 = 0.5 * power_iteration(stats.gram)

    def solve(k: int) -> SolverTrace:
        project = _block_projector(feasible_set, k, options)
        return accelerated_projected_gradient(
            lambda x: block_logistic(design, k, x), project, np.zeros(spec.block_size),
            lipschitz=L0, max_iter=options.max_iter, grad_tol=tol, backtracking=True,
            restart=options.restart,
        )

    traces = Parallel(n_jobs=options.n_jobs)(delayed(solve)(k) for k in range(spec.K))
    return _combine(spec, traces, "ml-logistic")
