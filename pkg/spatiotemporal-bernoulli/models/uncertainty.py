"""
Condition numbers, deviation and risk bounds, psi bands and confidence
intervals for linear functionals of the parameter vector.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.optimize import brentq, linprog, minimize
from scipy.special import logsumexp, softmax

from errors import BernoulliError, ConditionError, NumericalError
from models.constraints import FeasibleSet
from models.solvers import accelerated_projected_gradient, power_iteration
from models.stats import SuffStats

logger = logging.getLogger(__name__)

Blocks = Union[np.ndarray, Sequence[np.ndarray]]
Y_MAX = 700.0
LEVEL_CAP = 1e-15


# ------------------------------------------------------------------ condition numbers


@dataclass(frozen=True)
class ThetaResult:
    value: float
    p: float
    is_lower_bound: bool
    n_blocks: int


def _norm_p(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "∞"):
            return math.inf
        p = float(p)
    if p not in (1, 2, math.inf):
        raise ValueError(f"p must be 1, 2 or inf, got {p}")
    return float(p)


def _unique_blocks(blocks: Blocks) -> List[Tuple[np.ndarray, int]]:
    """Distinct block objects with their multiplicities, first-seen order."""
    if isinstance(blocks, np.ndarray) and blocks.ndim == 2:
        blocks = [blocks]
    seen: Dict[int, int] = {}
    unique: List[Tuple[np.ndarray, int]] = []
    for block in blocks:
        key = id(block)
        if key in seen:
            arr, count = unique[seen[key]]
            unique[seen[key]] = (arr, count + 1)
        else:
            seen[key] = len(unique)
            unique.append((np.asarray(block, dtype=float), 1))
    return unique


def _theta_inf_block(B: np.ndarray, starts: int = 3, seed: int = 0, tol: float = 1e-11) -> float:
    n = B.shape[0]
    if n == 0:
        return math.inf
    L = 2.0 * power_iteration(B)
    rng = np.random.default_rng(seed)
    best = math.inf
    for i in range(n):
        def objective(x):
            Bx = B @ x
            return float(x @ Bx), 2.0 * Bx

        def project(x, i=i):
            out = np.clip(x, -1.0, 1.0)
            out[i] = 1.0
            return out

        initials = [np.eye(n)[i]] + [rng.uniform(-1.0, 1.0, n) for _ in range(starts - 1)]
        for x0 in initials:
            trace = accelerated_projected_gradient(objective, project, x0, lipschitz=L or 1.0,
                                                   max_iter=20000, grad_tol=tol * (1.0 + L))
            best = min(best, objective(trace.x)[0])
    return best


def _box_max_upper(Q: np.ndarray) -> float:
    """
    Certified upper bound on max_{||x||_inf <= 1} x^T Q x for PSD Q: sum(lam)
    with Diag(lam) - Q PSD. Starts from the diagonal-dominance point and
    tightens it on the smoothed penalty sum(lam) + n * lambda_max(Q - Diag(lam)).
    """
    n = Q.shape[0]
    dominance = np.diag(Q) + (np.abs(Q).sum(axis=1) - np.abs(np.diag(Q)))
    best = float(dominance.sum())
    scale = float(np.max(np.abs(linalg.eigvalsh(Q)))) or 1.0

    def smoothed(lam, tau):
        eigvals, eigvecs = linalg.eigh(Q - np.diag(lam))
        weights = softmax(eigvals / tau)
        value = lam.sum() + n * tau * logsumexp(eigvals / tau)
        grad = 1.0 - n * (eigvecs ** 2) @ weights
        return value, grad

    lam = dominance.copy()
    for tau in scale * np.array([1e-1, 1e-2, 1e-3, 1e-4]):
        res = minimize(smoothed, lam, args=(tau,), jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "gtol": 1e-12})
        lam = res.x
    shift = float(linalg.eigvalsh(Q - np.diag(lam))[-1])
    certified = float(lam.sum() + n * shift + n * 1e-12 * scale)
    return min(best, certified)


def theta_p(A_blocks: Blocks, p, seed: int = 0) -> ThetaResult:
    """
    Condition number theta_p of a block-diagonal PSD matrix.

    p = 2 and p = inf are computed; p = 1 is a certified lower bound.
    """
    p = _norm_p(p)
    unique = _unique_blocks(A_blocks)
    if p == 2:
        value = min(float(linalg.eigvalsh(B)[0]) if B.size else math.inf for B, _ in unique)
        return ThetaResult(value, p, False, len(unique))
    if p == math.inf:
        value = min(_theta_inf_block(B, seed=seed) for B, _ in unique)
        return ThetaResult(value, p, False, len(unique))
    total = 0.0
    for B, count in unique:
        if B.size == 0:
            continue
        eigvals = linalg.eigvalsh(B)
        if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
            raise ConditionError(
                f"theta_1 needs a positive definite matrix; smallest eigenvalue {eigvals[0]:.3e}"
            )
        Q = linalg.inv(B)
        total += count * _box_max_upper(0.5 * (Q + Q.T))
    return ThetaResult(1.0 / total if total > 0 else math.inf, p, True, len(unique))


# ------------------------------------------------------------------ deviation / risk


@dataclass(frozen=True)
class DeviationBound:
    epsilon: float
    N: int
    kappa: int
    Theta: float
    delta_inf: float


def deviation_bound(N: int, kappa: int, epsilon: float, Theta: float = 1.0) -> DeviationBound:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    log_term = math.log(2.0 * kappa / epsilon)
    value = Theta * (math.sqrt(log_term / (2.0 * N)) + log_term / (3.0 * N))
    return DeviationBound(epsilon, int(N), int(kappa), float(Theta), value)


@dataclass(frozen=True)
class RiskBound:
    value: float
    p: float
    deviation: DeviationBound
    theta_p: float
    theta_1_lower: float


def risk_bound(A_blocks: Blocks, N: int, kappa: int, epsilon: float, p,
               theta_1: Optional[ThetaResult] = None) -> RiskBound:
    """Bound on ||beta_hat - beta||_p holding with probability >= 1 - epsilon."""
    p = _norm_p(p)
    theta_1 = theta_1 or theta_p(A_blocks, 1)
    theta = theta_1 if p == 1 else theta_p(A_blocks, p)
    deviation = deviation_bound(N, kappa, epsilon)
    denominator = math.sqrt(theta.value * theta_1.value)
    value = deviation.delta_inf / denominator if denominator > 0 else math.inf
    return RiskBound(value, p, deviation, theta.value, theta_1.value)


# ------------------------------------------------------------------ psi bands


def psi_bounds(nu, N: int, y: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lower / upper roots mu of |nu - mu| = sqrt(2 y mu (1 - mu) / N) + y / (3N).
    Scalars in, floats out; arrays in, arrays out.
    """
    if y <= 1.0:
        raise ValueError(f"y must exceed 1, got {y}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    scalar = np.ndim(nu) == 0
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if (nu < 0).any() or (nu > 1).any():
        raise ValueError("nu must lie in [0, 1]")
    denom = N + 2.0 * y
    cut = y / (3.0 * N)

    disc_lo = 2 * N * nu * y + y * y / 3.0 - (2.0 * y / N) * (y / 3.0 - nu * N) ** 2
    disc_hi = 2 * N * nu * y + 5.0 * y * y / 3.0 - (2.0 * y / N) * (y / 3.0 + nu * N) ** 2
    active_lo = nu > cut
    active_hi = nu < 1.0 - cut
    slack = 1e-9 * (N * y + y * y)
    if (disc_lo[active_lo] < -slack).any() or (disc_hi[active_hi] < -slack).any():
        raise NumericalError(f"Negative discriminant in psi bounds (N={N}, y={y})")
    lower = np.where(active_lo, (N * nu + 2 * y / 3.0 - np.sqrt(np.maximum(disc_lo, 0.0))) / denom, 0.0)
    upper = np.where(active_hi, (N * nu + 4 * y / 3.0 + np.sqrt(np.maximum(disc_hi, 0.0))) / denom, 1.0)
    lower, upper = np.clip(lower, 0.0, 1.0), np.clip(upper, 0.0, 1.0)
    if scalar:
        return float(lower[0]), float(upper[0])
    return lower, upper


@dataclass(frozen=True, eq=False)
class PsiBounds:
    y: float
    N: int
    lower: np.ndarray
    upper: np.ndarray
    coverage: float


def coverage_level(y: float, kappa: int, N: int) -> float:
    """
    Probability level of the simultaneous psi-band event. Values <= 0 mean the
    guarantee is vacuous at this y.
    """
    if y <= 1.0:
        raise ValueError(f"y must exceed 1, got {y}")
    return 1.0 - 2.0 * kappa * math.e * (y * (math.log((y - 1.0) * N) + 2.0) + 2.0) * math.exp(-y)


def _level_slope_sign(y: float, N: int) -> float:
    """Sign-carrying factor of d coverage_level / dy; positive past the turning point."""
    log_term = math.log((y - 1.0) * N) + 2.0
    return 2.0 - y / (y - 1.0) + (y - 1.0) * log_term


def coverage_y(target: float, kappa: int, N: int) -> float:
    """
    Smallest y on the increasing branch of coverage_level reaching target.

    coverage_level falls from +inf just above y = 1 to a single minimum and
    then rises towards 1; the search runs on the rising branch, capped where
    the level first reaches 1 - LEVEL_CAP.
    """
    if N < 1 or kappa < 1:
        raise ValueError(f"Need N >= 1 and kappa >= 1, got N={N}, kappa={kappa}")
    turning = brentq(lambda y: _level_slope_sign(y, N), 1.0 + 1e-12, Y_MAX, xtol=1e-12)
    ceiling = 1.0 - LEVEL_CAP
    y_cap = brentq(lambda y: coverage_level(y, kappa, N) - ceiling, turning, Y_MAX, xtol=1e-12)
    if not target <= ceiling:
        raise BernoulliError(f"Coverage level {target} unachievable; the largest usable level is {ceiling}")
    if coverage_level(turning, kappa, N) >= target:
        return turning
    return brentq(lambda y: coverage_level(y, kappa, N) - target, turning, y_cap, xtol=1e-12)


def psi_band(stats: SuffStats, y: float) -> PsiBounds:
    lower, upper = psi_bounds(stats.moment_vector(), stats.N, y)
    return PsiBounds(y, stats.N, lower, upper, coverage_level(y, stats.spec.kappa, stats.N))


# ------------------------------------------------------------------ confidence intervals


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    feasible: bool
    zero_moment_slots: int = 0


@dataclass
class ConfidenceProgram:
    """
    The pair of linear programs min / max e^T x over
    {x in X : psi_lower(a_i) <= (A x)_i <= psi_upper(a_i) for all i},
    solved block by block with HiGHS.
    """

    stats: SuffStats
    feasible_set: FeasibleSet
    y: float
    _forms: Dict[int, tuple] = field(default_factory=dict, repr=False)
    _feasible: Dict[int, bool] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.band = psi_band(self.stats, self.y)
        self.zero_moment_slots = int(np.sum(self.stats.moment_vector() == 0.0))
        if self.zero_moment_slots:
            logger.info("%d coordinates have zero empirical moment; psi_lower = 0 there",
                        self.zero_moment_slots)

    def _form(self, k: int):
        if k not in self._forms:
            spec = self.stats.spec
            form = self.feasible_set.lp_form(k)
            A_blk = sparse.csr_matrix(np.kron(self.stats.gram, np.eye(spec.M)))
            pad = sparse.csr_matrix((A_blk.shape[0], form.A_ub.shape[1] - form.n_x))
            lifted = sparse.hstack([A_blk, pad])
            size = spec.block_size
            lo = self.band.lower[k * size:(k + 1) * size]
            hi = self.band.upper[k * size:(k + 1) * size]
            A_ub = sparse.vstack([form.A_ub, lifted, -lifted]).tocsr()
            b_ub = np.concatenate([form.b_ub, hi, -lo])
            self._forms[k] = (A_ub, b_ub, form.bounds, form.n_x)
        return self._forms[k]

    def _solve(self, k: int, c_x: np.ndarray) -> Tuple[float, bool]:
        A_ub, b_ub, bounds, n_x = self._form(k)
        c = np.zeros(A_ub.shape[1])
        c[:n_x] = c_x
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs",
                      options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9})
        if res.status == 2:
            return math.nan, False
        if res.status == 3:
            return -math.inf, True
        if res.status != 0:
            raise NumericalError(f"Confidence LP for location {k + 1} failed: {res.message}")
        return float(res.fun), True

    def block_feasible(self, k: int) -> bool:
        if k not in self._feasible:
            self._feasible[k] = self._solve(k, np.zeros(self.stats.spec.block_size))[1]
        return self._feasible[k]

    def interval(self, e: np.ndarray) -> ConfidenceInterval:
        spec = self.stats.spec
        e = np.asarray(e, dtype=float).reshape(spec.K, spec.block_size)
        lower = upper = 0.0
        for k in range(spec.K):
            if not self.block_feasible(k):
                return ConfidenceInterval(math.nan, math.nan, False, self.zero_moment_slots)
            if not np.any(e[k]):
                continue
            low, ok_low = self._solve(k, e[k])
            high, ok_high = self._solve(k, -e[k])
            if not (ok_low and ok_high):
                return ConfidenceInterval(math.nan, math.nan, False, self.zero_moment_slots)
            lower += low
            upper -= high
        return ConfidenceInterval(lower, upper, True, self.zero_moment_slots)

    def coordinate_intervals(self) -> List[ConfidenceInterval]:
        eye = np.eye(self.stats.spec.kappa)
        return [self.interval(eye[i]) for i in range(self.stats.spec.kappa)]


def confint_linear(e: np.ndarray, stats: SuffStats, feasible_set: FeasibleSet, y: float) -> ConfidenceInterval:
    return ConfidenceProgram(stats, feasible_set, y).interval(e)
