"""
Process parameterization for multi-state spatio-temporal Bernoulli processes.

Parameter layout (location-major). For every location k the block holds
R = 1 + d*K*(M+1) rows of M values each:

    row 0                              baseline beta_k(p)
    row 1 + ((l*d + s-1)*(M+1) + q)    interaction beta^s_{kl}(p, q)

so flat index = k*M*R + row*M + (p-1). Rows are exactly the reduced feature
coordinates: at every time step the feature vector has a one in row 0 and in
the row addressed by (l, s, omega_{t-s, l}) for every (l, s).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import softmax

from errors import DomainError, FeasibilityError, RangeError


class LinkFunction(str, Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of the process plus the link choice."""

    K: int
    M: int
    d: int
    link: LinkFunction = LinkFunction.IDENTITY

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.d < 0:
            raise ValueError(f"Invalid dimensions K={self.K}, M={self.M}, d={self.d}")
        object.__setattr__(self, "link", LinkFunction(self.link))
        if self.link is LinkFunction.SIGMOID and self.M != 1:
            raise ValueError(f"Sigmoid link requires M=1, got M={self.M}")

    @property
    def n_features(self) -> int:
        """Reduced feature count R per location."""
        return 1 + self.d * self.K * (self.M + 1)

    @property
    def block_size(self) -> int:
        return self.M * self.n_features

    @property
    def kappa(self) -> int:
        return self.K * self.block_size

    def to_dict(self) -> dict:
        return {"K": self.K, "M": self.M, "d": self.d, "link": self.link.value}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        return cls(int(payload["K"]), int(payload["M"]), int(payload["d"]),
                   LinkFunction(payload.get("link", "identity")))

    def __str__(self) -> str:
        return f"ModelSpec(K={self.K}, M={self.M}, d={self.d}, link={self.link.value})"


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter vector in the canonical layout (read-only)."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if values.size != self.spec.kappa:
            raise ValueError(
                f"Parameter length {values.size} does not match kappa={self.spec.kappa} for {self.spec}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(spec, np.zeros(spec.kappa))

    @classmethod
    def from_parts(cls, spec: ModelSpec, baselines: np.ndarray,
                   interactions: Optional[np.ndarray] = None) -> "ParamVector":
        """
        Build from baselines (K, M) and interactions indexed [k, l, s-1, q, p-1]
        with shape (K, K, d, M+1, M).
        """
        K, M, d = spec.K, spec.M, spec.d
        blocks = np.zeros((K, spec.n_features, M))
        blocks[:, 0, :] = np.asarray(baselines, dtype=float).reshape(K, M)
        if interactions is not None and d > 0:
            blocks[:, 1:, :] = np.asarray(interactions, dtype=float).reshape(K, d * K * (M + 1), M)
        return cls(spec, blocks.reshape(-1))

    def blocks(self) -> np.ndarray:
        """View of shape (K, R, M)."""
        return self.values.reshape(self.spec.K, self.spec.n_features, self.spec.M)

    def baselines(self) -> np.ndarray:
        return self.blocks()[:, 0, :]

    def interactions(self) -> np.ndarray:
        """View of shape (K, K, d, M+1, M) indexed [k, l, s-1, q, p-1]."""
        s = self.spec
        return self.blocks()[:, 1:, :].reshape(s.K, s.K, s.d, s.M + 1, s.M)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, values)


@dataclass(frozen=True, eq=False)
class EventPanel:
    """
    Observed states over times -d+1..N (rows) and K locations (columns).
    Row r holds time t = r - d + 1, so rows 0..d-1 are the initial segment.
    """

    spec: ModelSpec
    omega: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.omega)
        if raw.ndim != 2 or raw.shape[1] != self.spec.K:
            raise ValueError(f"Panel must have shape (N+d, {self.spec.K}), got {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > self.spec.M):
            raise RangeError(f"Panel entries must lie in 0..{self.spec.M}")
        if raw.shape[0] <= self.spec.d:
            raise ValueError(f"Panel needs more than d={self.spec.d} rows, got {raw.shape[0]}")
        omega = raw.astype(np.uint8 if self.spec.M < 255 else np.int64)
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_series(cls, series: np.ndarray, spec: ModelSpec) -> "EventPanel":
        """Use the first d rows of a raw series as the initial segment."""
        return cls(spec, series)

    @property
    def N(self) -> int:
        return self.omega.shape[0] - self.spec.d

    def states(self) -> np.ndarray:
        """Rows for t = 1..N, shape (N, K)."""
        return self.omega[self.spec.d:]

    def window(self, t: int) -> np.ndarray:
        """The d rows preceding time t (1-based), oldest first."""
        if not 1 <= t <= self.N + 1:
            raise RangeError(f"Time {t} outside 1..{self.N + 1}")
        return self.omega[t - 1:t - 1 + self.spec.d]


@dataclass(frozen=True, eq=False)
class StateEncoding:
    """K blocks of length M; block k is one-hot at omega_k or all zero."""

    bar_omega: np.ndarray
    M: int

    def decode(self) -> np.ndarray:
        blocks = self.bar_omega.reshape(-1, self.M)
        active = blocks.any(axis=1)
        return np.where(active, blocks.argmax(axis=1) + 1, 0)


def encode_state(row, M: int) -> StateEncoding:
    row = np.asarray(row, dtype=int).reshape(-1)
    if row.size and (row.min() < 0 or row.max() > M):
        raise RangeError(f"State row {row.tolist()} has entries outside 0..{M}")
    encoded = np.zeros((row.size, M))
    active = row > 0
    encoded[np.flatnonzero(active), row[active] - 1] = 1.0
    return StateEncoding(encoded.reshape(-1), M)


def decode_state(encoding: StateEncoding) -> np.ndarray:
    return encoding.decode()


class ParamCoordinate(NamedTuple):
    """Semantic coordinate, 1-based; ell/s/q are None for baselines."""

    k: int
    p: int
    ell: Optional[int] = None
    s: Optional[int] = None
    q: Optional[int] = None

    @property
    def is_baseline(self) -> bool:
        return self.ell is None


def _check(name: str, value: int, lo: int, hi: int):
    if not lo <= value <= hi:
        raise RangeError(f"{name}={value} outside {lo}..{hi}")


def feature_row(spec: ModelSpec, ell: int, s: int, q: int) -> int:
    """Reduced feature row for (l, s, q), all 1-based except q."""
    return 1 + ((ell - 1) * spec.d + (s - 1)) * (spec.M + 1) + q


def param_index(spec: ModelSpec, k: int, p: int, ell: Optional[int] = None,
                s: Optional[int] = None, q: Optional[int] = None) -> int:
    """Flat index of beta_k(p) (ell is None) or beta^s_{k,ell}(p, q)."""
    _check("k", k, 1, spec.K)
    _check("p", p, 1, spec.M)
    row = 0
    if ell is not None:
        if s is None or q is None:
            raise RangeError("Interaction coordinates need ell, s and q")
        _check("ell", ell, 1, spec.K)
        _check("s", s, 1, spec.d)
        _check("q", q, 0, spec.M)
        row = feature_row(spec, ell, s, q)
    return (k - 1) * spec.block_size + row * spec.M + (p - 1)


def param_coordinate(spec: ModelSpec, index: int) -> ParamCoordinate:
    """Inverse of param_index."""
    _check("index", index, 0, spec.kappa - 1)
    k0, rest = divmod(index, spec.block_size)
    row, p0 = divmod(rest, spec.M)
    if row == 0:
        return ParamCoordinate(k0 + 1, p0 + 1)
    pair, q = divmod(row - 1, spec.M + 1)
    ell0, s0 = divmod(pair, spec.d)
    return ParamCoordinate(k0 + 1, p0 + 1, ell0 + 1, s0 + 1, q)


def lagged_feature_rows(spec: ModelSpec, omega: np.ndarray) -> np.ndarray:
    """
    Active reduced feature rows for every time step of a panel array.

    Args:
        spec: model dimensions
        omega: (N + d, K) state array, initial segment first

    Returns:
        Integer array (N, 1 + d*K); column 0 is the baseline row
    """
    K, M, d = spec.K, spec.M, spec.d
    n = omega.shape[0] - d
    rows = np.zeros((n, 1 + d * K), dtype=np.int64)
    for s in range(1, d + 1):
        lagged = omega[d - s:d - s + n].astype(np.int64)  # omega_{t-s}, shape (n, K)
        cols = 1 + ((np.arange(K) * d + (s - 1)) * (M + 1))[None, :] + lagged
        rows[:, 1 + (s - 1)::d] = cols
    return rows


def feature_indices(spec: ModelSpec, window: np.ndarray) -> np.ndarray:
    """Active feature rows (1 + dK of them) for a single (d, K) window."""
    window = np.asarray(window)
    if window.shape != (spec.d, spec.K):
        raise ValueError(f"Window must have shape ({spec.d}, {spec.K}), got {window.shape}")
    if window.size and (window.min() < 0 or window.max() > spec.M):
        raise RangeError(f"Window entries must lie in 0..{spec.M}")
    padded = np.vstack([window, np.zeros((1, spec.K), dtype=window.dtype)])
    return lagged_feature_rows(spec, padded)[0]


def linear_index(beta: ParamVector, window: np.ndarray) -> np.ndarray:
    """z_{kp} = row-sum of the active feature rows, shape (K, M)."""
    rows = feature_indices(beta.spec, window)
    return beta.blocks()[:, rows, :].sum(axis=1)


def link_eval(link: LinkFunction, z: np.ndarray, tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """
    Map linear indices (K, M) to category probabilities and ground probabilities.
    """
    link = LinkFunction(link)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if link is LinkFunction.IDENTITY:
        totals = z.sum(axis=1)
        bad = (z < -tol).any(axis=1) | (z > 1 + tol).any(axis=1) | (totals > 1 + tol)
        if bad.any():
            k = int(np.flatnonzero(bad)[0]) + 1
            raise DomainError(f"Identity link index out of [0,1] at location {k}: {z[k - 1]}", k=k)
        probs = np.clip(z, 0.0, 1.0)
        return probs, np.clip(1.0 - probs.sum(axis=1), 0.0, 1.0)
    if link is LinkFunction.SIGMOID and z.shape[1] != 1:
        raise DomainError(f"Sigmoid link expects one category, got {z.shape[1]}")
    # ground score fixed at zero
    scores = np.hstack([z, np.zeros((z.shape[0], 1))])
    full = softmax(scores, axis=1)
    return full[:, :-1], full[:, -1]


def conditional_probs(beta: ParamVector, window: np.ndarray, tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """
    Event probabilities at time t given the d preceding rows.

    Returns:
        (K, M) category probabilities and the K ground-state probabilities
    """
    z = linear_index(beta, window)
    if beta.spec.link is LinkFunction.IDENTITY:
        try:
            return link_eval(LinkFunction.IDENTITY, z, tol)
        except DomainError as exc:
            raise FeasibilityError(f"Infeasible parameters: {exc}") from exc
    return link_eval(beta.spec.link, z, tol)
