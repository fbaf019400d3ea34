import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from models.model import EventPanel, ModelSpec, ParamVector  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_panel(rng):
    """Random panel with uniformly drawn states."""
    def _make(spec: ModelSpec, N: int) -> EventPanel:
        return EventPanel(spec, rng.integers(0, spec.M + 1, size=(N + spec.d, spec.K)))
    return _make


@pytest.fixture
def make_beta(rng):
    """
    Random parameters strictly inside the basic polytope: baselines in
    [0.05, 0.15] and small interactions of either sign.
    """
    def _make(spec: ModelSpec, scale: float = 0.02, nonnegative: bool = False) -> ParamVector:
        base = rng.uniform(0.05, 0.15, (spec.K, spec.M)) / spec.M
        lo = 0.0 if nonnegative else -0.25 * scale
        inter = rng.uniform(lo, scale, (spec.K, spec.K, spec.d, spec.M + 1, spec.M))
        # keep every location's worst case inside [0, 1]
        per_location = max(1, spec.d * spec.K)
        inter /= per_location * spec.M
        return ParamVector.from_parts(spec, base, inter)
    return _make
