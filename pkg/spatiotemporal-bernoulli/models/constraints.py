"""
Convex feasible sets over the parameter vector, feasibility checks and
Euclidean projection.

A set is an ordered tuple of atoms. Every atom acts separately on each
location block, so projection runs block by block. Inside a block the basic
polytope

    rho <= b_p + sum_j min_q W[j, q, p]                 (one per category p)
    sum_p b_p + sum_j max_q sum_p W[j, q, p] <= 1 - rho

is split into its lower half (separable over p) and its upper half. Each half
is the sublevel set of one concave / convex function, so its projection is
x0 +/- lambda * (super)gradient with a scalar multiplier lambda; the
(super)gradient is a water-filling allocation over the q-entries of every lag
pair j = (l, s), and lambda is the root of a monotone piecewise-linear scalar
equation. Dykstra's iteration composes the halves with the remaining atoms.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.optimize import brentq, nnls

from errors import ConvergenceError, FeasibilityError
from models.model import ModelSpec, ParamVector, param_index

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_STOP = 1e-10
DEFAULT_MAX_ITER = 10000


# ------------------------------------------------------------------ atoms


@dataclass(frozen=True)
class BasicPolytope:
    rho: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rho < 0.5:
            raise ValueError(f"rho must lie in [0, 0.5), got {self.rho}")


@dataclass(frozen=True, eq=False)
class Box:
    """Per-slot bounds; scalars broadcast over all kappa slots."""

    lower: Union[float, np.ndarray] = -np.inf
    upper: Union[float, np.ndarray] = np.inf


@dataclass(frozen=True)
class ZeroMask:
    slots: Tuple[int, ...] = ()

    @classmethod
    def ground(cls, spec: ModelSpec) -> "ZeroMask":
        """Zero every interaction driven by the ground state (q = 0)."""
        return cls(tuple(
            param_index(spec, k, p, ell, s, 0)
            for k in range(1, spec.K + 1) for p in range(1, spec.M + 1)
            for ell in range(1, spec.K + 1) for s in range(1, spec.d + 1)
        ))

    @classmethod
    def pairs(cls, spec: ModelSpec, pairs: Iterable[Tuple[int, int]]) -> "ZeroMask":
        """Zero all interactions of the given (k, l) pairs (1-based)."""
        return cls(tuple(
            param_index(spec, k, p, ell, s, q)
            for k, ell in pairs for p in range(1, spec.M + 1)
            for s in range(1, spec.d + 1) for q in range(spec.M + 1)
        ))


@dataclass(frozen=True)
class LocalityMask:
    """Zero interactions between locations with |k - l| > radius."""

    radius: int = 1


@dataclass(frozen=True)
class ShapeMonotoneConvex:
    """Every curve s -> beta^s_{kl}(p, q) is non-increasing and convex."""


@dataclass(frozen=True)
class NonnegativeInteractions:
    pass


Atom = Union[BasicPolytope, Box, ZeroMask, LocalityMask, ShapeMonotoneConvex, NonnegativeInteractions]


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: Dict[str, float]
    details: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class LinearForm:
    """
    Lifted linear description of one block: A_ub z <= b_ub with z = (x, u, v),
    where u / v are the auxiliary min / max variables of the basic polytope.
    """

    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    bounds: List[Tuple[Optional[float], Optional[float]]]
    n_x: int


# ------------------------------------------------------------------ shape cone


def _shape_rows(d: int) -> np.ndarray:
    rows = []
    for s in range(d - 1):
        row = np.zeros(d)
        row[s], row[s + 1] = 1.0, -1.0
        rows.append(row)
    for s in range(1, d - 1):
        row = np.zeros(d)
        row[s - 1], row[s], row[s + 1] = 1.0, -2.0, 1.0
        rows.append(row)
    return np.array(rows).reshape(-1, d)


def shape_project(curve: Sequence[float]) -> np.ndarray:
    """
    Euclidean projection onto non-increasing convex sequences.

    Solves the dual min_{lam >= 0} ||D^T lam + y||^2 by Lawson-Hanson active
    set (scipy nnls) and returns y + D^T lam.
    """
    y = np.asarray(curve, dtype=float).reshape(-1)
    if y.size < 1:
        raise ValueError("Curve must have at least one point")
    if y.size == 1:
        return y.copy()
    D = _shape_rows(y.size)
    if (D @ y >= 0).all():
        return y.copy()
    lam, _ = nnls(D.T, -y, maxiter=50 * D.shape[0])
    return y + D.T @ lam


def _shape_violation(curves: np.ndarray) -> float:
    """curves: (..., d) array."""
    if curves.shape[-1] < 2:
        return 0.0
    worst = np.max(np.diff(curves, axis=-1))
    if curves.shape[-1] > 2:
        worst = max(worst, np.max(-np.diff(curves, n=2, axis=-1)))
    return float(max(worst, 0.0))


# ------------------------------------------------------------------ basic polytope halves


def _lower_levels(sorted_vals: np.ndarray, csum: np.ndarray, fixed_min: np.ndarray, lam: float) -> np.ndarray:
    counts = np.arange(1, sorted_vals.shape[1] + 1)
    level = np.min((lam + csum) / counts, axis=1)
    return np.minimum(level, fixed_min)


def _project_lower(b: np.ndarray, W: np.ndarray, free_b: np.ndarray, free_W: np.ndarray, rho: float):
    """Project (b, W[j, q, p]) onto {rho <= b_p + sum_j min_q W[j, q, p]} for all p."""
    b, W = b.copy(), W.copy()
    for p in range(b.size):
        vals, free = W[:, :, p], free_W[:, :, p]
        sorted_vals = np.sort(np.where(free, vals, np.inf), axis=1)
        csum = np.cumsum(sorted_vals, axis=1)
        fixed_min = np.min(np.where(free, np.inf, vals), axis=1)
        step = 1.0 if free_b[p] else 0.0

        def gap(lam):
            return b[p] + step * lam + np.sum(_lower_levels(sorted_vals, csum, fixed_min, lam)) - rho

        deficit = -gap(0.0)
        if deficit <= 0:
            continue
        hi = max(deficit, 1e-12)
        while gap(hi) < 0:
            hi *= 2.0
            if hi > 1e12:
                raise FeasibilityError(f"Lower constraint for category {p + 1} cannot be met")
        lam = brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        level = _lower_levels(sorted_vals, csum, fixed_min, lam)
        W[:, :, p] = np.where(free, np.maximum(vals, level[:, None]), vals)
        b[p] += step * lam
    return b, W


def _project_upper(b: np.ndarray, W: np.ndarray, free_b: np.ndarray, free_W: np.ndarray, rho: float):
    """Project onto {sum_p b_p + sum_j max_q sum_p W[j, q, p] <= 1 - rho}."""
    S = W.sum(axis=2)
    movers = free_W.sum(axis=2)
    movable = movers > 0
    weights = np.where(movable, 1.0 / np.maximum(movers, 1), 0.0)
    order = np.argsort(-np.where(movable, S, -np.inf), axis=1, kind="stable")
    sorted_S = np.take_along_axis(np.where(movable, S, 0.0), order, axis=1)
    sorted_w = np.take_along_axis(weights, order, axis=1)
    cw = np.cumsum(sorted_w, axis=1)
    cws = np.cumsum(sorted_w * sorted_S, axis=1)
    top_movable = np.max(np.where(movable, S, -np.inf), axis=1)
    fixed_max = np.max(np.where(movable, -np.inf, S), axis=1)
    n_free_b = float(free_b.sum())

    def levels(mu):
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.where(cw > 0, (cws - mu) / np.where(cw > 0, cw, 1.0), -np.inf)
        return np.maximum(np.max(cand, axis=1), fixed_max)

    def excess(mu):
        level = levels(mu)
        top = np.maximum(np.minimum(top_movable, level), fixed_max)
        return np.sum(b) - n_free_b * mu + np.sum(top) - (1.0 - rho)

    over = excess(0.0)
    if over <= 0:
        return b.copy(), W.copy()
    hi = over / max(n_free_b, 1.0)
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            raise FeasibilityError("Upper constraint cannot be met")
    mu = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    level = levels(mu)
    shrink = np.where(movable, S - np.minimum(S, level[:, None]), 0.0)
    W = W - np.where(free_W, (shrink / np.maximum(movers, 1))[:, :, None], 0.0)
    return b - np.where(free_b, mu, 0.0), W


# ------------------------------------------------------------------ feasible set


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    spec: ModelSpec
    atoms: Tuple[Atom, ...]

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if not self.atoms:
            raise ValueError("A feasible set needs at least one atom")
        if sum(isinstance(a, BasicPolytope) for a in self.atoms) > 1:
            raise ValueError("At most one BasicPolytope atom is allowed")

    @classmethod
    def standard(cls, spec: ModelSpec, rho: float = 0.0, ground_mask: Optional[bool] = None,
                 locality: Optional[int] = None, nonnegative: bool = False, shape: bool = False,
                 box: Optional[Tuple[float, float]] = None) -> "FeasibleSet":
        """
        Basic polytope plus the usual extras. The ground-state mask defaults
        on for single-state models.
        """
        atoms: List[Atom] = [BasicPolytope(rho)]
        use_ground = spec.M == 1 if ground_mask is None else ground_mask
        if use_ground:
            atoms.append(ZeroMask.ground(spec))
        if locality is not None:
            atoms.append(LocalityMask(locality))
        if nonnegative:
            atoms.append(NonnegativeInteractions())
        if box is not None:
            atoms.append(Box(*box))
        if shape:
            atoms.append(ShapeMonotoneConvex())
        return cls(spec, tuple(atoms))

    @property
    def rho(self) -> Optional[float]:
        for atom in self.atoms:
            if isinstance(atom, BasicPolytope):
                return atom.rho
        return None

    def with_rho(self, rho: float) -> "FeasibleSet":
        if self.rho is None:
            return FeasibleSet(self.spec, (BasicPolytope(rho),) + self.atoms)
        return FeasibleSet(self.spec, tuple(
            BasicPolytope(rho) if isinstance(a, BasicPolytope) else a for a in self.atoms
        ))

    def extended(self, *atoms: Atom) -> "FeasibleSet":
        return FeasibleSet(self.spec, self.atoms + tuple(atoms))

    # -------------------------------------------------------------- geometry

    @cached_property
    def _atom_masks(self) -> Dict[int, np.ndarray]:
        """Per mask atom (by position), the (K, block_size) slots it pins to zero."""
        spec = self.spec
        masks = {}
        for i, atom in enumerate(self.atoms):
            slots: Sequence[int] = ()
            if isinstance(atom, ZeroMask):
                slots = atom.slots
            elif isinstance(atom, LocalityMask) and spec.d > 0:
                far = [(k, ell) for k in range(1, spec.K + 1) for ell in range(1, spec.K + 1)
                       if abs(k - ell) > atom.radius]
                slots = ZeroMask.pairs(spec, far).slots
            else:
                continue
            fixed = np.zeros(spec.kappa, dtype=bool)
            fixed[np.asarray(slots, dtype=np.int64)] = True
            masks[i] = fixed.reshape(spec.K, spec.block_size)
        return masks

    @cached_property
    def fixed_mask(self) -> np.ndarray:
        """(K, block_size) boolean: True where a mask pins the slot to zero."""
        fixed = np.zeros((self.spec.K, self.spec.block_size), dtype=bool)
        for mask in self._atom_masks.values():
            fixed |= mask
        return fixed

    def free_mask(self) -> np.ndarray:
        return ~self.fixed_mask.reshape(-1)

    @cached_property
    def _interaction_slots(self) -> np.ndarray:
        slots = np.ones(self.spec.block_size, dtype=bool)
        slots[:self.spec.M] = False
        return slots

    def _box_bounds(self, atom: Box, k: int) -> Tuple[np.ndarray, np.ndarray]:
        size = self.spec.block_size
        lo = np.broadcast_to(np.asarray(atom.lower, dtype=float), (self.spec.kappa,)).reshape(self.spec.K, size)[k]
        hi = np.broadcast_to(np.asarray(atom.upper, dtype=float), (self.spec.kappa,)).reshape(self.spec.K, size)[k]
        return lo, hi

    def _split(self, x: np.ndarray):
        spec = self.spec
        X = x.reshape(spec.n_features, spec.M)
        return X[0].copy(), X[1:].reshape(spec.d * spec.K, spec.M + 1, spec.M).copy()

    def _join(self, b: np.ndarray, W: np.ndarray) -> np.ndarray:
        return np.concatenate([b, W.reshape(-1)])

    def _curves(self, x: np.ndarray) -> np.ndarray:
        """Block interactions as curves (l, q, p, s)."""
        spec = self.spec
        W = x[spec.M:].reshape(spec.K, spec.d, spec.M + 1, spec.M)
        return np.moveaxis(W, 1, -1)

    def _from_curves(self, x: np.ndarray, curves: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[self.spec.M:] = np.moveaxis(curves, -1, 1).reshape(-1)
        return out

    # -------------------------------------------------------------- checks

    def _block_violations(self, k: int, x: np.ndarray) -> Dict[str, float]:
        spec = self.spec
        fixed = self.fixed_mask[k]
        out: Dict[str, float] = {}
        for i, atom in enumerate(self.atoms):
            name = type(atom).__name__
            if name in out:
                name = f"{name}#{i}"
            if isinstance(atom, BasicPolytope):
                b, W = self._split(x)
                lower = atom.rho - (b + W.min(axis=1).sum(axis=0))
                upper = b.sum() + W.sum(axis=2).max(axis=1).sum() - (1.0 - atom.rho)
                out[name + ".lower"] = float(max(lower.max(initial=0.0), 0.0))
                out[name + ".upper"] = float(max(upper, 0.0))
                out[name] = max(out[name + ".lower"], out[name + ".upper"])
            elif isinstance(atom, Box):
                lo, hi = self._box_bounds(atom, k)
                out[name] = float(max(np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0), 0.0))
            elif isinstance(atom, (ZeroMask, LocalityMask)):
                mask = self._atom_masks.get(i)
                out[name] = 0.0 if mask is None else float(np.max(np.abs(x[mask[k]]), initial=0.0))
            elif isinstance(atom, ShapeMonotoneConvex):
                out[name] = _shape_violation(self._curves(x)) if spec.d > 0 else 0.0
            elif isinstance(atom, NonnegativeInteractions):
                out[name] = float(max(np.max(-x[self._interaction_slots], initial=0.0), 0.0))
        return out

    def check_feasible(self, beta: Union[ParamVector, np.ndarray], tol: float = DEFAULT_TOL) -> FeasibilityReport:
        values = beta.values if isinstance(beta, ParamVector) else np.asarray(beta, dtype=float)
        blocks = values.reshape(self.spec.K, self.spec.block_size)
        worst: Dict[str, float] = {}
        for k in range(self.spec.K):
            for name, v in self._block_violations(k, blocks[k]).items():
                worst[name] = max(worst.get(name, 0.0), v)
        details = {n: v for n, v in worst.items() if "." in n}
        violations = {n: v for n, v in worst.items() if "." not in n}
        return FeasibilityReport(all(v <= tol for v in violations.values()), violations, details)

    def block_feasible(self, k: int, x: np.ndarray, tol: float = DEFAULT_TOL) -> bool:
        return all(v <= tol for n, v in self._block_violations(k, x).items() if "." not in n)

    # -------------------------------------------------------------- projection

    def _components(self, k: int) -> List[Callable[[np.ndarray], np.ndarray]]:
        spec = self.spec
        fixed = self.fixed_mask[k]
        free = ~fixed
        free_b = free[:spec.M]
        free_W = free[spec.M:].reshape(spec.d * spec.K, spec.M + 1, spec.M)
        comps: List[Callable[[np.ndarray], np.ndarray]] = []
        mask_added = False

        def apply_mask(x):
            return np.where(fixed, 0.0, x)

        for atom in self.atoms:
            if isinstance(atom, BasicPolytope):
                rho = atom.rho

                def lower(x, rho=rho):
                    b, W = self._split(apply_mask(x))
                    return self._join(*_project_lower(b, W, free_b, free_W, rho))

                def upper(x, rho=rho):
                    b, W = self._split(apply_mask(x))
                    return self._join(*_project_upper(b, W, free_b, free_W, rho))

                comps.extend([lower, upper])
            elif isinstance(atom, Box):
                lo, hi = self._box_bounds(atom, k)
                comps.append(lambda x, lo=lo, hi=hi: np.clip(x, lo, hi))
            elif isinstance(atom, (ZeroMask, LocalityMask)):
                if not mask_added and fixed.any():
                    comps.append(apply_mask)
                    mask_added = True
            elif isinstance(atom, ShapeMonotoneConvex):
                if spec.d > 0:
                    comps.append(self._project_shape)
            elif isinstance(atom, NonnegativeInteractions):
                slots = self._interaction_slots
                comps.append(lambda x, slots=slots: np.where(slots, np.maximum(x, 0.0), x))
        return comps

    def _project_shape(self, x: np.ndarray) -> np.ndarray:
        curves = self._curves(x)
        flat = curves.reshape(-1, self.spec.d)
        projected = np.array([shape_project(c) for c in flat]).reshape(curves.shape)
        return self._from_curves(x, projected)

    def project_block(self, k: int, x: np.ndarray, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, stop_tol: float = DEFAULT_STOP) -> np.ndarray:
        """Dykstra's alternating projections over the atoms of location k (0-based)."""
        x = np.asarray(x, dtype=float).copy()
        if self.block_feasible(k, x, tol=0.0):
            return x
        comps = self._components(k)
        if len(comps) == 1:
            return comps[0](x)
        increments = [np.zeros_like(x) for _ in comps]
        displacement = np.inf
        for it in range(max_iter):
            previous = x
            drift = 0.0
            for i, proj in enumerate(comps):
                y = proj(x + increments[i])
                updated = x + increments[i] - y
                drift += float(np.linalg.norm(updated - increments[i]))
                increments[i] = updated
                x = y
            # a cycle can leave x in place while the corrections still move
            displacement = max(float(np.linalg.norm(x - previous)), drift)
            if displacement < stop_tol and self.block_feasible(k, x, tol):
                logger.debug("Dykstra block %d converged in %d cycles", k + 1, it + 1)
                return x
        raise ConvergenceError(
            f"Projection of block {k + 1} did not converge in {max_iter} cycles "
            f"(displacement {displacement:.3e})",
            iterate=x, residual=displacement,
        )

    def project(self, x: Union[ParamVector, np.ndarray], tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, stop_tol: float = DEFAULT_STOP):
        values = x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=float)
        blocks = values.reshape(self.spec.K, self.spec.block_size)
        out = np.concatenate([
            self.project_block(k, blocks[k], tol=tol, max_iter=max_iter, stop_tol=stop_tol)
            for k in range(self.spec.K)
        ])
        return x.with_values(out) if isinstance(x, ParamVector) else out

    # -------------------------------------------------------------- linear form

    def lp_form(self, k: int) -> LinearForm:
        """Lifted linear representation of block k (0-based)."""
        spec = self.spec
        M, Q, J = spec.M, spec.M + 1, spec.d * spec.K
        n_x = spec.block_size
        fixed = self.fixed_mask[k]
        lo = np.full(n_x, -np.inf)
        hi = np.full(n_x, np.inf)
        rows, cols, vals, rhs = [], [], [], []
        n_rows = 0

        def add(entries, bound):
            nonlocal n_rows
            for c, v in entries:
                rows.append(n_rows)
                cols.append(c)
                vals.append(v)
            rhs.append(bound)
            n_rows += 1

        def w_index(j, q, p):
            return (1 + j * Q + q) * M + p

        basic = next((a for a in self.atoms if isinstance(a, BasicPolytope)), None)
        n_z = n_x + (J * M + J if basic is not None else 0)
        if basic is not None:
            u0, v0 = n_x, n_x + J * M
            for j in range(J):
                for q in range(Q):
                    for p in range(M):
                        add([(u0 + j * M + p, 1.0), (w_index(j, q, p), -1.0)], 0.0)
                    add([(w_index(j, q, p), 1.0) for p in range(M)] + [(v0 + j, -1.0)], 0.0)
            for p in range(M):
                add([(p, -1.0)] + [(u0 + j * M + p, -1.0) for j in range(J)], -basic.rho)
            add([(p, 1.0) for p in range(M)] + [(v0 + j, 1.0) for j in range(J)], 1.0 - basic.rho)
        for atom in self.atoms:
            if isinstance(atom, Box):
                blo, bhi = self._box_bounds(atom, k)
                lo, hi = np.maximum(lo, blo), np.minimum(hi, bhi)
            elif isinstance(atom, NonnegativeInteractions):
                lo = np.where(self._interaction_slots, np.maximum(lo, 0.0), lo)
            elif isinstance(atom, ShapeMonotoneConvex) and spec.d > 1:
                D = _shape_rows(spec.d)
                for ell in range(spec.K):
                    for q in range(Q):
                        for p in range(M):
                            idx = [w_index(ell * spec.d + s, q, p) for s in range(spec.d)]
                            for row in D:
                                add([(idx[s], -row[s]) for s in range(spec.d) if row[s] != 0.0], 0.0)
        lo[fixed], hi[fixed] = 0.0, 0.0
        bounds = [(None if np.isinf(a) else float(a), None if np.isinf(b) else float(b)) for a, b in zip(lo, hi)]
        bounds += [(None, None)] * (n_z - n_x)
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_z))
        return LinearForm(A, np.asarray(rhs, dtype=float), bounds, n_x)
