"""
Sufficient statistics, objectives and empirical vector fields.

All quantities are built from the reduced feature rows of models.model: the
feature vector at time t is the same for every location, so one Gram matrix
G = (1/N) sum_t phi_t phi_t^T serves all location blocks, and the full matrix
A is block-diagonal with blocks kron(G, I_M).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.linalg import block_diag
from scipy.special import logsumexp, softmax, xlogy

from errors import DomainError
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector, lagged_feature_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Design:
    """Sparse feature matrix phi (N x R) and one-hot targets (N, K, M)."""

    spec: ModelSpec
    phi: sparse.csr_matrix = field(repr=False)
    targets: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.phi.shape[0]


def build_design(panel: EventPanel) -> Design:
    spec = panel.spec
    rows = lagged_feature_rows(spec, panel.omega)
    n, width = rows.shape
    phi = sparse.csr_matrix(
        (np.ones(n * width), rows.ravel(), np.arange(0, n * width + 1, width)),
        shape=(n, spec.n_features),
    )
    states = panel.states().astype(np.int64)
    targets = np.zeros((n, spec.K, spec.M))
    t_idx, k_idx = np.nonzero(states)
    targets[t_idx, k_idx, states[t_idx, k_idx] - 1] = 1.0
    return Design(spec, phi, targets)


@dataclass(frozen=True, eq=False)
class SuffStats:
    """
    Shared Gram G (R x R), per-location moments a (K, R, M) and the
    constant (1/2N) sum_t ||bar omega_t||^2 split per location.
    """

    spec: ModelSpec
    gram: np.ndarray
    moments: np.ndarray
    N: int
    constants: np.ndarray

    def gram_blocks(self, free: Optional[np.ndarray] = None):
        """
        Per-location blocks of A, optionally restricted to free coordinates.

        Args:
            free: boolean mask over the kappa coordinates (False = fixed at zero)
        """
        full = np.kron(self.gram, np.eye(self.spec.M))
        if free is None:
            return [full] * self.spec.K
        free = np.asarray(free, dtype=bool).reshape(self.spec.K, -1)
        cache = {}
        blocks = []
        for k in range(self.spec.K):
            key = free[k].tobytes()
            if key not in cache:
                cache[key] = full[np.ix_(free[k], free[k])]
            blocks.append(cache[key])
        return blocks

    def dense_matrix(self) -> np.ndarray:
        """Full kappa x kappa matrix A. Only sensible for small models."""
        return block_diag(*self.gram_blocks())

    def moment_vector(self) -> np.ndarray:
        return self.moments.reshape(-1)


def _partial_sums(phi: sparse.csr_matrix, targets: np.ndarray):
    flat = targets.reshape(targets.shape[0], -1)
    return (phi.T @ phi).toarray(), phi.T @ flat, (flat ** 2).reshape(targets.shape).sum(axis=(0, 2))


def accumulate(panel: EventPanel, spec: Optional[ModelSpec] = None, design: Optional[Design] = None,
               chunk_size: int = 50000, n_jobs: int = 1) -> SuffStats:
    """
    Compute A and a in one pass over t, in time chunks reduced at the end.
    """
    spec = spec or panel.spec
    if spec != panel.spec:
        raise ValueError(f"Panel spec {panel.spec} differs from {spec}")
    if panel.N < 1:
        raise ValueError(f"Need N >= 1 observations, got {panel.N}")
    design = design or build_design(panel)
    n = design.N
    bounds = [(lo, min(lo + chunk_size, n)) for lo in range(0, n, chunk_size)]
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_partial_sums)(design.phi[lo:hi], design.targets[lo:hi]) for lo, hi in bounds
    )
    gram = sum(part[0] for part in parts) / n
    cross = sum(part[1] for part in parts) / n
    squares = sum(part[2] for part in parts)
    moments = np.asarray(cross).reshape(spec.n_features, spec.K, spec.M).transpose(1, 0, 2)
    logger.debug("Accumulated statistics for %s over N=%d", spec, n)
    return SuffStats(spec, gram, np.ascontiguousarray(moments), n, squares / (2.0 * n))


def block_ls(stats: SuffStats, k: int, x: np.ndarray) -> Tuple[float, np.ndarray]:
    """LS value and gradient for location k (0-based) at flattened block x."""
    X = x.reshape(stats.spec.n_features, stats.spec.M)
    GX = stats.gram @ X
    a = stats.moments[k]
    value = 0.5 * float(np.sum(X * GX)) - float(np.sum(a * X)) + float(stats.constants[k])
    return value, (GX - a).reshape(-1)


def ls_objective(beta: ParamVector, stats: SuffStats) -> Tuple[float, np.ndarray]:
    """
    Quadratic LS objective 1/2 b^T A b - a^T b + c, where c makes the value equal
    (1/2N) sum_t ||eta_t^T b - bar omega_t||^2.
    """
    spec = stats.spec
    blocks = beta.values.reshape(spec.K, -1)
    value, grads = 0.0, []
    for k in range(spec.K):
        v, g = block_ls(stats, k, blocks[k])
        value += v
        grads.append(g)
    return value, np.concatenate(grads)


def _scores(design: Design, x: np.ndarray) -> np.ndarray:
    return np.asarray(design.phi @ x.reshape(design.spec.n_features, design.spec.M))


def block_ml(design: Design, k: int, x: np.ndarray, rho: float) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood (linear link) for location k."""
    z = _scores(design, x)
    w = design.targets[:, k, :]
    total = z.sum(axis=1)
    bad = (z < rho).any(axis=1) | (total > 1.0 - rho)
    if bad.any():
        t = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"Likelihood domain violated at t={t + 1}, k={k + 1}: z={z[t]}, rho={rho}", t=t + 1, k=k + 1
        )
    ground_w = 1.0 - w.sum(axis=1)
    ground_z = 1.0 - total
    n = design.N
    value = -(np.sum(xlogy(w, z)) + np.sum(xlogy(ground_w, ground_z))) / n
    theta = -w / z + (ground_w / ground_z)[:, None]
    grad = np.asarray(design.phi.T @ theta) / n
    return float(value), grad.reshape(-1)


def ml_objective(beta: ParamVector, panel: EventPanel, rho: float,
                 design: Optional[Design] = None) -> Tuple[float, np.ndarray]:
    design = design or build_design(panel)
    spec = panel.spec
    blocks = beta.values.reshape(spec.K, -1)
    value, grads = 0.0, []
    for k in range(spec.K):
        v, g = block_ml(design, k, blocks[k], rho)
        value += v
        grads.append(g)
    return value, np.concatenate(grads)


def block_logistic(design: Design, k: int, x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Logistic negative log-likelihood with the ground score pinned at zero."""
    z = _scores(design, x)
    w = design.targets[:, k, :]
    padded = np.hstack([z, np.zeros((z.shape[0], 1))])
    n = design.N
    value = -(np.sum(w * z) - np.sum(logsumexp(padded, axis=1))) / n
    probs = softmax(padded, axis=1)[:, :-1]
    grad = np.asarray(design.phi.T @ (probs - w)) / n
    return float(value), grad.reshape(-1)


def logistic_objective(beta: ParamVector, panel: EventPanel,
                       design: Optional[Design] = None) -> Tuple[float, np.ndarray]:
    design = design or build_design(panel)
    spec = panel.spec
    blocks = beta.values.reshape(spec.K, -1)
    value, grads = 0.0, []
    for k in range(spec.K):
        v, g = block_logistic(design, k, blocks[k])
        value += v
        grads.append(g)
    return value, np.concatenate(grads)


def block_field(design: Design, k: int, x: np.ndarray, link: LinkFunction) -> np.ndarray:
    """(1/N) sum_t eta_t [phi(eta_t^T x) - bar omega_t] for a nonlinear link."""
    if LinkFunction(link) is LinkFunction.IDENTITY:
        raise ValueError("Identity field is the LS gradient; use block_ls")
    return block_logistic(design, k, x)[1]


def empirical_field(beta: ParamVector, panel: EventPanel, link: Optional[LinkFunction] = None,
                    design: Optional[Design] = None, stats: Optional[SuffStats] = None) -> np.ndarray:
    link = LinkFunction(link or panel.spec.link)
    if link is LinkFunction.IDENTITY:
        stats = stats or accumulate(panel, design=design)
        return ls_objective(beta, stats)[1]
    if link is LinkFunction.SIGMOID and panel.spec.M != 1:
        raise DomainError(f"Sigmoid field needs M=1, got M={panel.spec.M}")
    design = design or build_design(panel)
    blocks = beta.values.reshape(panel.spec.K, -1)
    return np.concatenate([block_field(design, k, blocks[k], link) for k in range(panel.spec.K)])
