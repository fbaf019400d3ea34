"""
Exact sample-path generation for multi-state spatio-temporal Bernoulli processes.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from errors import FeasibilityError, NumericalError
from models.constraints import BasicPolytope, FeasibleSet
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector, lagged_feature_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimConfig:
    N: int
    seed: int
    initial_window: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"Horizon N must be >= 1, got {self.N}")

    def window_for(self, spec: ModelSpec) -> np.ndarray:
        if self.initial_window is None:
            return np.zeros((spec.d, spec.K), dtype=np.int64)
        window = np.asarray(self.initial_window, dtype=np.int64)
        if window.shape != (spec.d, spec.K):
            raise ValueError(f"Initial window must have shape ({spec.d}, {spec.K}), got {window.shape}")
        if window.size and (window.min() < 0 or window.max() > spec.M):
            raise ValueError(f"Initial window entries must lie in 0..{spec.M}")
        return window


def uniform_stream(seed: int, N: int, K: int) -> np.ndarray:
    """
    Uniforms u[t, k] from a Philox counter stream keyed by the seed.
    Entry (t, k) sits at counter position t*K + k, so it depends only on (seed, t, k).
    """
    generator = np.random.Generator(np.random.Philox(key=int(seed) % (1 << 64)))
    return generator.random((N, K))


def _step_probs(spec: ModelSpec, blocks: np.ndarray, rows: np.ndarray) -> np.ndarray:
    z = blocks[:, rows, :].sum(axis=1)
    if spec.link is LinkFunction.IDENTITY:
        return z
    scores = np.hstack([z, np.zeros((spec.K, 1))])
    return softmax(scores, axis=1)[:, :-1]


def simulate(spec: ModelSpec, beta: ParamVector, config: SimConfig, tol: float = 1e-9) -> EventPanel:
    """
    Draw one path of length N.

    Each location samples its category by inverse CDF over (1, ..., M, ground)
    with its own uniform, independently of the other locations given the history.
    """
    if beta.spec != spec:
        raise ValueError(f"Parameter spec {beta.spec} differs from {spec}")
    if spec.link is LinkFunction.IDENTITY:
        report = FeasibleSet(spec, (BasicPolytope(0.0),)).check_feasible(beta, tol=tol)
        if not report.feasible:
            raise FeasibilityError(f"Parameters violate the basic polytope: {report.violations}")

    K, d = spec.K, spec.d
    omega = np.zeros((config.N + d, K), dtype=np.int64)
    omega[:d] = config.window_for(spec)
    uniforms = uniform_stream(config.seed, config.N, K)
    blocks = beta.blocks()

    for t in range(config.N):
        rows = lagged_feature_rows(spec, omega[t:t + d + 1])[0]
        probs = _step_probs(spec, blocks, rows)
        totals = probs.sum(axis=1)
        if (probs < -tol).any() or (totals > 1 + tol).any():
            raise NumericalError(f"Probability vector left the simplex at t={t + 1}: {probs}")
        cdf = np.cumsum(np.clip(probs, 0.0, 1.0), axis=1)
        below = uniforms[t][:, None] < cdf
        # ground state takes whatever mass remains after categories 1..M
        omega[t + d] = np.where(below.any(axis=1), 1 + (~below).sum(axis=1), 0)
    logger.debug("Simulated %d steps for %s (seed=%d)", config.N, spec, config.seed)
    return EventPanel(spec, omega)


def frequency_report(panel: EventPanel) -> np.ndarray:
    """(K, M) matrix of per-location per-category event frequencies over t = 1..N."""
    states = panel.states().astype(np.int64)
    counts = np.stack([(states == p).sum(axis=0) for p in range(1, panel.spec.M + 1)], axis=1)
    return counts / panel.N
