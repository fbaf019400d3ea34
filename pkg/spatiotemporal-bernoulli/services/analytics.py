"""
Analytics Utilities for Parameter Recovery Studies
Provides error metrics, influence matrices, support thresholding and
frequency comparisons
"""

from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from models.model import ModelSpec, ParamVector

NORMS = ("l1", "l2", "linf")
PARTS = ("all", "birth", "inter")


def _norm(vector: np.ndarray, name: str) -> float:
    if vector.size == 0:
        return 0.0
    if name == "l1":
        return float(np.sum(np.abs(vector)))
    if name == "l2":
        return float(np.sqrt(np.sum(vector ** 2)))
    return float(np.max(np.abs(vector)))


def split_parts(spec: ModelSpec, values: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Split a flat parameter vector into birthrate and interaction sub-vectors

    Args:
        spec: model dimensions
        values: flat vector in the canonical layout

    Returns:
        Dict with "all", "birth" and "inter" arrays
    """
    blocks = np.asarray(values, dtype=float).reshape(spec.K, spec.n_features, spec.M)
    return {
        "all": blocks.reshape(-1),
        "birth": blocks[:, 0, :].reshape(-1),
        "inter": blocks[:, 1:, :].reshape(-1),
    }


def error_metrics(truth: ParamVector, estimate: ParamVector) -> List[Dict[str, object]]:
    """
    Absolute and relative l1 / l2 / linf errors per parameter family

    Args:
        truth: true parameters
        estimate: estimated parameters (same spec)

    Returns:
        One row per (part, norm) with "absolute" and "relative" entries;
        relative is None where the true sub-vector is zero
    """
    spec = truth.spec
    true_parts = split_parts(spec, truth.values)
    diff_parts = split_parts(spec, estimate.values - truth.values)
    rows = []
    for part in PARTS:
        for norm in NORMS:
            absolute = _norm(diff_parts[part], norm)
            scale = _norm(true_parts[part], norm)
            rows.append({
                "part": part,
                "norm": norm,
                "absolute": absolute,
                "relative": absolute / scale if scale > 0 else None,
            })
    return rows


def influence_matrix(beta: ParamVector) -> np.ndarray:
    """K x K matrix of max_{s,p,q} |beta^s_{kl}(p, q)|"""
    spec = beta.spec
    if spec.d == 0:
        return np.zeros((spec.K, spec.K))
    return np.abs(beta.interactions()).max(axis=(2, 3, 4))


def largest_gap_threshold(values: np.ndarray) -> Tuple[float, float, float]:
    """
    Threshold at the middle of the largest gap between sorted values

    Returns:
        (threshold, gap_low, gap_high)
    """
    ordered = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if ordered.size < 2:
        value = float(ordered[0]) if ordered.size else 0.0
        return value, value, value
    gaps = np.diff(ordered)
    i = int(np.argmax(gaps))
    return 0.5 * (ordered[i] + ordered[i + 1]), float(ordered[i]), float(ordered[i + 1])


def support_recovery(estimate: ParamVector, true_edges: FrozenSet[Tuple[int, int]],
                     threshold: Optional[float] = None) -> Dict[str, object]:
    """
    Recover the interaction graph by thresholding the influence matrix

    Args:
        estimate: estimated parameters
        true_edges: set of (k, l) pairs, 1-based
        threshold: fixed threshold; the largest-gap rule is used when None

    Returns:
        Dict with threshold, gap bounds, recovered edges, error counts and exact flag
    """
    influence = influence_matrix(estimate)
    if threshold is None:
        threshold, low, high = largest_gap_threshold(influence)
    else:
        low = high = float(threshold)
    K = influence.shape[0]
    recovered = {(k + 1, ell + 1) for k in range(K) for ell in range(K) if influence[k, ell] > threshold}
    missed = set(true_edges) - recovered
    spurious = recovered - set(true_edges)
    return {
        "threshold": float(threshold),
        "gap_low": low,
        "gap_high": high,
        "recovered": sorted([list(e) for e in recovered]),
        "missed": len(missed),
        "spurious": len(spurious),
        "exact": not missed and not spurious,
        "influence": influence.reshape(-1).tolist(),
    }


def frequency_distance(first: np.ndarray, second: np.ndarray) -> float:
    """l1 distance between two K x M frequency matrices"""
    return float(np.sum(np.abs(np.asarray(first) - np.asarray(second))))
