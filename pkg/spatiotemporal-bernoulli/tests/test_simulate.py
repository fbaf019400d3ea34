import numpy as np
import pytest

from errors import FeasibilityError
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector, conditional_probs
from models.simulate import SimConfig, frequency_report, simulate, uniform_stream


def test_bernoulli_rate_without_history():
    spec = ModelSpec(1, 1, 0)
    panel = simulate(spec, ParamVector(spec, [0.3]), SimConfig(N=100000, seed=1))
    assert panel.states().mean() == pytest.approx(0.3, abs=0.006)


def test_zero_parameters_give_empty_panel():
    spec = ModelSpec(3, 2, 2)
    panel = simulate(spec, ParamVector.zeros(spec), SimConfig(N=50, seed=3))
    assert not panel.states().any()


def test_category_frequencies():
    spec = ModelSpec(2, 2, 0)
    beta = ParamVector.from_parts(spec, np.tile([0.2, 0.5], (2, 1)))
    N = 50000
    freq = frequency_report(simulate(spec, beta, SimConfig(N=N, seed=11)))
    sigma = np.sqrt(np.array([0.2 * 0.8, 0.5 * 0.5]) / N)
    assert np.all(np.abs(freq - [0.2, 0.5]) < 4 * sigma)


def test_simulation_is_deterministic(make_beta):
    spec = ModelSpec(3, 2, 2)
    beta = make_beta(spec)
    first = simulate(spec, beta, SimConfig(N=200, seed=42))
    second = simulate(spec, beta, SimConfig(N=200, seed=42))
    other = simulate(spec, beta, SimConfig(N=200, seed=43))
    assert np.array_equal(first.omega, second.omega)
    assert not np.array_equal(first.omega, other.omega)


def test_uniform_stream_prefix_stable():
    assert np.array_equal(uniform_stream(5, 10, 3), uniform_stream(5, 20, 3)[:10])


def test_initial_window_is_kept():
    spec = ModelSpec(2, 1, 2)
    window = np.array([[1, 0], [0, 1]])
    panel = simulate(spec, ParamVector.zeros(spec), SimConfig(N=5, seed=0, initial_window=window))
    assert panel.omega[:2].tolist() == window.tolist()
    with pytest.raises(ValueError):
        simulate(spec, ParamVector.zeros(spec), SimConfig(N=5, seed=0, initial_window=np.ones((1, 2))))


def test_infeasible_parameters_rejected():
    spec = ModelSpec(1, 1, 0)
    with pytest.raises(FeasibilityError):
        simulate(spec, ParamVector(spec, [1.1]), SimConfig(N=10, seed=0))
    with pytest.raises(ValueError):
        SimConfig(N=0, seed=0)


def test_logistic_link_simulates_softmax_rates():
    spec = ModelSpec(1, 2, 0, LinkFunction.LOGISTIC)
    beta = ParamVector(spec, [0.0, 0.0])
    freq = frequency_report(simulate(spec, beta, SimConfig(N=30000, seed=9)))
    assert np.allclose(freq, 1 / 3, atol=4 * np.sqrt(2 / 9 / 30000))


def test_frequency_report_counts():
    spec = ModelSpec(2, 1, 1)
    omega = np.array([[0, 0], [1, 0], [1, 1], [1, 0]])
    freq = frequency_report(EventPanel(spec, omega))
    assert freq.tolist() == [[1.0], [1 / 3]]
    assert not frequency_report(EventPanel(spec, np.zeros((4, 2), dtype=int))).any()


def test_frequency_report_matches_counting_loop(make_panel):
    spec = ModelSpec(3, 3, 1)
    panel = make_panel(spec, 200)
    freq = frequency_report(panel)
    for k in range(3):
        for p in range(1, 4):
            count = sum(1 for t in range(1, panel.N + 1) if panel.omega[t, k] == p)
            assert freq[k, p - 1] == pytest.approx(count / panel.N)


def assert_matches_conditional_law(panel, beta, min_count=400):
    """Group events by their lagged history and compare with the model's probabilities."""
    spec = panel.spec
    omega = panel.omega.astype(np.int64)
    histories = {}
    for t in range(panel.N):
        histories.setdefault(omega[t:t + spec.d].tobytes(), []).append(t + spec.d)
    checked = 0
    for rows in histories.values():
        if len(rows) < min_count:
            continue
        window = omega[rows[0] - spec.d:rows[0]]
        probs, _ = conditional_probs(beta, window)
        states = omega[rows]
        for p in range(1, spec.M + 1):
            freq = (states == p).mean(axis=0)
            sigma = np.sqrt(probs[:, p - 1] * (1 - probs[:, p - 1]) / len(rows))
            assert np.all(np.abs(freq - probs[:, p - 1]) <= 4.5 * sigma + 1e-12)
        checked += 1
    return checked


def test_events_follow_conditional_law_binary():
    spec = ModelSpec(2, 1, 1)
    inter = np.zeros((2, 2, 1, 2, 1))
    inter[0, 1, 0, 1, 0] = 0.4
    inter[1, 0, 0, 1, 0] = 0.3
    inter[1, 1, 0, 1, 0] = 0.2
    beta = ParamVector.from_parts(spec, np.array([[0.2], [0.3]]), inter)
    panel = simulate(spec, beta, SimConfig(N=40000, seed=5))
    assert assert_matches_conditional_law(panel, beta) == 4


def test_events_follow_conditional_law_categorical():
    spec = ModelSpec(1, 2, 1)
    inter = np.zeros((1, 1, 1, 3, 2))
    inter[0, 0, 0, 1] = [0.3, 0.0]
    inter[0, 0, 0, 2] = [0.0, 0.4]
    beta = ParamVector.from_parts(spec, np.array([[0.2, 0.3]]), inter)
    panel = simulate(spec, beta, SimConfig(N=40000, seed=9))
    assert assert_matches_conditional_law(panel, beta) == 3
