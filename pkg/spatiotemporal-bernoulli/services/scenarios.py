"""
True-parameter generators for the synthetic studies.

- single_state: uniform nonnegative local interactions, monotone convex in the lag
- multi_state: same-category triggering (variant 1) or ordered triggering (variant 2)
- network: bump-shaped curves on a sparse directed graph with one inhibiting edge
"""

import logging
from dataclasses import dataclass
from typing import FrozenSet, Optional, Tuple

import numpy as np

from errors import FeasibilityError
from models.constraints import BasicPolytope, FeasibleSet, shape_project
from models.model import ModelSpec, ParamVector

logger = logging.getLogger(__name__)

SLACK = 0.05
SCENARIOS = ("single_state", "multi_state", "network")


@dataclass(frozen=True, eq=False)
class Truth:
    beta: ParamVector
    edges: Optional[FrozenSet[Tuple[int, int]]] = None  # (k, l): l influences k, 1-based


def _shaped(curves: np.ndarray) -> np.ndarray:
    """Project every lag curve (last axis) onto the monotone convex cone, then clip at zero."""
    flat = curves.reshape(-1, curves.shape[-1])
    projected = np.array([shape_project(c) for c in flat]).reshape(curves.shape)
    return np.maximum(projected, 0.0)


def _rescale(spec: ModelSpec, base: np.ndarray, inter: np.ndarray, slack: float):
    """Scale each location block so the upper constraint holds with the given slack."""
    for k in range(spec.K):
        # inter[k]: (l, s, q, p); max over q of the category sum, summed over (l, s)
        upper = base[k].sum() + inter[k].sum(axis=3).max(axis=2).sum()
        if upper > 0:
            factor = (1.0 - slack) / upper
            base[k] *= factor
            inter[k] *= factor
    return base, inter


def _assert_feasible(spec: ModelSpec, beta: ParamVector, name: str) -> ParamVector:
    report = FeasibleSet(spec, (BasicPolytope(0.0),)).check_feasible(beta)
    if not report.feasible:
        raise FeasibilityError(f"{name} generator produced infeasible parameters: {report.violations}")
    return beta


def single_state(spec: ModelSpec, rng: np.random.Generator, locality_radius: int = 1,
                 slack: float = SLACK, shape: bool = True) -> Truth:
    if spec.M != 1:
        raise ValueError(f"single_state scenario needs M=1, got M={spec.M}")
    K, d = spec.K, spec.d
    base = rng.uniform(0.0, 1.0, (K, 1))
    inter = np.zeros((K, K, d, 2, 1))
    for k in range(K):
        for ell in range(K):
            if abs(k - ell) <= locality_radius and d > 0:
                curve = rng.uniform(0.0, 1.0, d)
                inter[k, ell, :, 1, 0] = _shaped(curve[None, :])[0] if shape else curve
    base, inter = _rescale(spec, base, inter, slack)
    return Truth(_assert_feasible(spec, ParamVector.from_parts(spec, base, inter), "single_state"))


def multi_state(spec: ModelSpec, rng: np.random.Generator, variant: int = 1,
                locality_radius: Optional[int] = None, slack: float = SLACK, shape: bool = True) -> Truth:
    """
    Variant 1: a category-q event only triggers category q.
    Variant 2: a category-q event triggers categories p <= q.
    """
    if variant not in (1, 2):
        raise ValueError(f"variant must be 1 or 2, got {variant}")
    K, M, d = spec.K, spec.M, spec.d
    base = rng.uniform(0.0, 1.0, (K, M))
    inter = np.zeros((K, K, d, M + 1, M))
    if d > 0:
        allowed = np.zeros((M + 1, M), dtype=bool)
        for q in range(1, M + 1):
            for p in range(1, M + 1):
                allowed[q, p - 1] = (p == q) if variant == 1 else (p <= q)
        for k in range(K):
            for ell in range(K):
                if locality_radius is not None and abs(k - ell) > locality_radius:
                    continue
                draws = rng.uniform(0.0, 1.0, (M + 1, M, d))
                curves = _shaped(draws) if shape else draws
                inter[k, ell] = np.where(allowed[:, :, None], curves, 0.0).transpose(2, 0, 1)
    base, inter = _rescale(spec, base, inter, slack)
    return Truth(_assert_feasible(spec, ParamVector.from_parts(spec, base, inter), "multi_state"))


def random_graph(K: int, rng: np.random.Generator, edge_probability: float = 0.2,
                 negated: Tuple[int, int] = (8, 1)) -> FrozenSet[Tuple[int, int]]:
    """Self loops, random directed edges, and the (k, l) edge that will inhibit."""
    edges = {(k, k) for k in range(1, K + 1)}
    for k in range(1, K + 1):
        for ell in range(1, K + 1):
            if k != ell and rng.uniform() < edge_probability:
                edges.add((k, ell))
    if max(negated) <= K:
        edges.add(negated)
    return frozenset(edges)


def network(spec: ModelSpec, rng: np.random.Generator, edge_probability: float = 0.2,
            negated: Tuple[int, int] = (8, 1), slack: float = SLACK) -> Truth:
    """
    Baselines ~ U[0, 0.2]; each edge l -> k carries 0.05 * exp(-0.25 (s - tau)^2)
    with tau uniform on 1..d. The negated edge inhibits; its target's baseline
    is raised when needed so probabilities stay nonnegative, and positive curves
    are scaled down when the upper constraint would fail.
    """
    if spec.M != 1:
        raise ValueError(f"network scenario needs M=1, got M={spec.M}")
    K, d = spec.K, spec.d
    edges = random_graph(K, rng, edge_probability, negated)
    base = rng.uniform(0.0, 0.2, (K, 1))
    inter = np.zeros((K, K, d, 2, 1))
    lags = np.arange(1, d + 1)
    for k, ell in sorted(edges):
        tau = rng.integers(1, d + 1) if d > 0 else 0
        curve = 0.05 * np.exp(-0.25 * (lags - tau) ** 2)
        inter[k - 1, ell - 1, :, 1, 0] = -curve if (k, ell) == negated else curve
    for k in range(K):
        negative = -np.minimum(inter[k], 0.0).sum()
        if base[k, 0] < negative:
            base[k, 0] = negative + 0.01
        positive = np.maximum(inter[k], 0.0).sum()
        room = 1.0 - slack - base[k, 0]
        if positive > room:
            inter[k] = np.where(inter[k] > 0, inter[k] * max(room, 0.0) / positive, inter[k])
    beta = ParamVector.from_parts(spec, base, inter)
    return Truth(_assert_feasible(spec, beta, "network"), edges)


def generate_truth(scenario: str, spec: ModelSpec, rng: np.random.Generator, **options) -> Truth:
    if scenario == "single_state":
        return single_state(spec, rng, **options)
    if scenario == "multi_state":
        return multi_state(spec, rng, **options)
    if scenario == "network":
        if "negated" in options:
            options["negated"] = tuple(options["negated"])
        return network(spec, rng, **options)
    raise ValueError(f"Unknown scenario '{scenario}', expected one of {SCENARIOS}")
