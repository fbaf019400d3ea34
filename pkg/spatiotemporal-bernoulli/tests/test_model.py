import itertools

import numpy as np
import pytest

from errors import DomainError, FeasibilityError, RangeError
from models.model import (
    EventPanel, LinkFunction, ModelSpec, ParamVector, conditional_probs, decode_state,
    encode_state, link_eval, param_coordinate, param_index,
)


def test_layout_size():
    assert ModelSpec(1, 1, 1).kappa == 3
    assert ModelSpec(2, 2, 3).kappa == 76
    assert ModelSpec(3, 2, 0).kappa == 6


def test_param_index_first_slots():
    spec = ModelSpec(1, 1, 1)
    assert param_index(spec, 1, 1) == 0
    assert param_index(spec, 1, 1, ell=1, s=1, q=0) == 1
    assert param_index(spec, 1, 1, ell=1, s=1, q=1) == 2


def test_param_index_is_a_bijection():
    spec = ModelSpec(2, 2, 3)
    seen = set()
    for k, p in itertools.product(range(1, 3), range(1, 3)):
        seen.add(param_index(spec, k, p))
        for ell, s, q in itertools.product(range(1, 3), range(1, 4), range(0, 3)):
            seen.add(param_index(spec, k, p, ell, s, q))
    assert seen == set(range(spec.kappa))
    for i in range(spec.kappa):
        c = param_coordinate(spec, i)
        assert param_index(spec, c.k, c.p, c.ell, c.s, c.q) == i


def test_param_index_range_errors():
    spec = ModelSpec(2, 2, 1)
    with pytest.raises(RangeError):
        param_index(spec, 3, 1)
    with pytest.raises(RangeError):
        param_index(spec, 1, 1, ell=1, s=2, q=0)
    with pytest.raises(RangeError):
        param_index(spec, 1, 1, ell=1, s=1, q=3)
    with pytest.raises(RangeError):
        param_coordinate(spec, spec.kappa)


def test_interactions_view_matches_param_index(make_beta):
    spec = ModelSpec(2, 2, 3)
    beta = make_beta(spec)
    inter = beta.interactions()
    for k, ell, s, q, p in itertools.product(range(1, 3), range(1, 3), range(1, 4), range(3), range(1, 3)):
        assert inter[k - 1, ell - 1, s - 1, q, p - 1] == beta.values[param_index(spec, k, p, ell, s, q)]
    assert np.array_equal(beta.baselines()[1], [beta.values[param_index(spec, 2, 1)],
                                                beta.values[param_index(spec, 2, 2)]])


def test_param_vector_is_read_only():
    beta = ParamVector.zeros(ModelSpec(1, 1, 1))
    with pytest.raises(ValueError):
        beta.values[0] = 1.0
    with pytest.raises(ValueError):
        ParamVector(ModelSpec(1, 1, 1), np.zeros(4))


def test_conditional_probs_without_history():
    spec = ModelSpec(3, 2, 0)
    beta = ParamVector.from_parts(spec, np.full((3, 2), 0.2))
    probs, ground = conditional_probs(beta, np.zeros((0, 3), dtype=int))
    assert np.allclose(probs, 0.2)
    assert np.allclose(ground, 0.6)


def test_conditional_probs_single_lag():
    spec = ModelSpec(1, 1, 1)
    values = np.zeros(spec.kappa)
    values[param_index(spec, 1, 1)] = 0.1
    values[param_index(spec, 1, 1, 1, 1, 1)] = 0.2
    probs, _ = conditional_probs(ParamVector(spec, values), np.array([[1]]))
    assert probs[0, 0] == pytest.approx(0.3)


def test_conditional_probs_matches_loop_oracle(make_beta, rng):
    spec = ModelSpec(2, 2, 2)
    beta = make_beta(spec)
    window = rng.integers(0, 3, size=(2, 2))
    probs, ground = conditional_probs(beta, window)
    expected = np.zeros((2, 2))
    for k, p in itertools.product(range(1, 3), range(1, 3)):
        z = beta.values[param_index(spec, k, p)]
        for ell, s in itertools.product(range(1, 3), range(1, 3)):
            # window is oldest first: omega_{t-s} sits in row d - s
            q = int(window[spec.d - s, ell - 1])
            z += beta.values[param_index(spec, k, p, ell, s, q)]
        expected[k - 1, p - 1] = z
    assert np.allclose(probs, expected)
    assert np.allclose(ground, 1 - expected.sum(axis=1))


def test_conditional_probs_rejects_infeasible():
    spec = ModelSpec(1, 1, 0)
    beta = ParamVector(spec, [1.2])
    with pytest.raises(FeasibilityError):
        conditional_probs(beta, np.zeros((0, 1), dtype=int))


@pytest.mark.parametrize("row,M,expected", [
    ((0, 2), 2, [0, 0, 0, 1]),
    ((1,), 1, [1]),
])
def test_encode_state(row, M, expected):
    assert encode_state(row, M).bar_omega.tolist() == expected


def test_encode_decode_exhaustive():
    for row in itertools.product(range(4), repeat=3):
        assert decode_state(encode_state(row, 3)).tolist() == list(row)
    with pytest.raises(RangeError):
        encode_state((0, 4), 3)


def test_link_sigmoid_symmetry():
    probs, ground = link_eval(LinkFunction.SIGMOID, np.zeros((1, 1)))
    assert probs[0, 0] == pytest.approx(0.5)
    assert ground[0] == pytest.approx(0.5)


def test_link_logistic():
    probs, ground = link_eval(LinkFunction.LOGISTIC, np.zeros((1, 2)))
    assert np.allclose(probs, 1 / 3)
    assert ground[0] == pytest.approx(1 / 3)

    probs, ground = link_eval(LinkFunction.LOGISTIC, np.array([[1.0, -1.0]]))
    denom = 1 + np.e + np.exp(-1)
    assert np.allclose(probs[0], [np.e / denom, np.exp(-1) / denom])
    assert ground[0] == pytest.approx(1 / denom)


def test_link_identity_domain():
    with pytest.raises(DomainError) as info:
        link_eval(LinkFunction.IDENTITY, np.array([[0.2, 0.3], [0.7, 0.5]]))
    assert info.value.k == 2


def test_sigmoid_requires_single_category():
    with pytest.raises(ValueError):
        ModelSpec(2, 2, 1, LinkFunction.SIGMOID)


def test_panel_validation_and_window():
    spec = ModelSpec(2, 1, 2)
    omega = np.array([[0, 1], [1, 0], [1, 1], [0, 0]])
    panel = EventPanel(spec, omega)
    assert panel.N == 2
    assert panel.window(1).tolist() == [[0, 1], [1, 0]]
    assert panel.window(3).tolist() == [[1, 1], [0, 0]]
    with pytest.raises(RangeError):
        panel.window(4)
    with pytest.raises(RangeError):
        EventPanel(spec, np.full((3, 2), 2))
    with pytest.raises(ValueError):
        EventPanel(spec, np.zeros((2, 2), dtype=int))
