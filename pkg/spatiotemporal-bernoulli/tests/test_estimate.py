import numpy as np
import pytest
from scipy.special import logit, softmax
from sklearn.linear_model import LogisticRegression

from errors import InitializationError
from models.constraints import BasicPolytope, Box, FeasibleSet, ZeroMask
from models.estimate import (
    SolveOptions, StepRule, estimate_ls, estimate_ml, estimate_ml_logistic, estimate_vi,
)
from models.model import EventPanel, LinkFunction, ModelSpec, ParamVector
from models.simulate import SimConfig, simulate
from models.solvers import extragradient
from models.stats import SuffStats, accumulate, block_field, build_design, ls_objective
from services.analytics import error_metrics
from services.scenarios import generate_truth

TIGHT = SolveOptions(grad_tol=1e-11)


def relative(metrics, part, norm):
    return next(m["relative"] for m in metrics if m["part"] == part and m["norm"] == norm)


def test_ls_interior_matches_normal_equations(make_panel):
    spec = ModelSpec(2, 1, 1)
    panel = make_panel(spec, 2000)
    feasible_set = FeasibleSet(spec, (Box(-10.0, 10.0), ZeroMask.ground(spec)))
    result = estimate_ls(panel, spec, feasible_set, TIGHT)
    assert result.converged

    stats = accumulate(panel)
    free = feasible_set.free_mask().reshape(spec.K, -1)
    blocks = stats.gram_blocks(feasible_set.free_mask())
    expected = np.zeros((spec.K, spec.block_size))
    for k in range(spec.K):
        expected[k, free[k]] = np.linalg.solve(blocks[k], stats.moments[k].reshape(-1)[free[k]])
    assert np.allclose(result.beta_hat.values, expected.reshape(-1), atol=1e-8)
    assert not any(result.block_degenerate)


def test_ls_zero_set_forces_zero():
    spec = ModelSpec(2, 2, 1)
    panel = simulate(spec, ParamVector.zeros(spec), SimConfig(N=100, seed=0))
    feasible_set = FeasibleSet(spec, (BasicPolytope(0.0), Box(0.0, 0.0)))
    assert np.allclose(estimate_ls(panel, spec, feasible_set).beta_hat.values, 0.0, atol=1e-10)


def test_ls_recovers_truth_from_exact_moments(make_panel):
    # K=1, d=1 chain: P(event | last state w) = b + c * w, stationary rate b / (1 - c)
    spec = ModelSpec(1, 1, 1)
    b, c = 0.2, 0.3
    on = b / (1.0 - c)
    off = 1.0 - on
    gram = np.array([[1.0, off, on], [off, off, 0.0], [on, 0.0, on]])
    moments = np.array([on, off * b, on * (b + c)]).reshape(1, 3, 1)
    stats = SuffStats(spec, gram, moments, 10 ** 9, np.array([on / 2.0]))
    feasible_set = FeasibleSet.standard(spec)
    result = estimate_ls(make_panel(spec, 10), spec, feasible_set, TIGHT, stats=stats)
    assert np.allclose(result.beta_hat.values, [b, 0.0, c], atol=1e-6)


def test_ls_beats_random_feasible_points(make_beta):
    spec = ModelSpec(3, 1, 2)
    truth = make_beta(spec, nonnegative=True)
    panel = simulate(spec, truth, SimConfig(N=3000, seed=5))
    feasible_set = FeasibleSet.standard(spec)
    result = estimate_ls(panel, spec, feasible_set)
    assert result.converged
    assert np.all(np.diff(result.objective_trace) <= 1e-12)

    stats = accumulate(panel)
    best = ls_objective(result.beta_hat, stats)[0]
    rng = np.random.default_rng(0)
    for _ in range(50):
        candidate = feasible_set.project(rng.uniform(-0.1, 0.3, spec.kappa))
        assert best <= ls_objective(ParamVector(spec, candidate), stats)[0] + 1e-9


def test_ls_joint_and_decomposed_agree(make_panel):
    spec = ModelSpec(2, 2, 1)
    panel = make_panel(spec, 500)
    feasible_set = FeasibleSet.standard(spec, rho=0.0)
    joint = estimate_ls(panel, spec, feasible_set, decompose=False)
    split = estimate_ls(panel, spec, feasible_set)
    stats = accumulate(panel)
    assert ls_objective(joint.beta_hat, stats)[0] == pytest.approx(ls_objective(split.beta_hat, stats)[0], abs=1e-6)


def test_ls_backtracking_rule(make_panel):
    spec = ModelSpec(2, 1, 1)
    panel = make_panel(spec, 400)
    feasible_set = FeasibleSet.standard(spec)
    fixed = estimate_ls(panel, spec, feasible_set)
    armijo = estimate_ls(panel, spec, feasible_set, SolveOptions(step_rule=StepRule.BACKTRACKING_ARMIJO))
    stats = accumulate(panel)
    assert ls_objective(armijo.beta_hat, stats)[0] == pytest.approx(ls_objective(fixed.beta_hat, stats)[0], abs=1e-6)


def test_ls_iteration_limit_flags_non_convergence(make_panel):
    spec = ModelSpec(2, 1, 2)
    panel = make_panel(spec, 300)
    result = estimate_ls(panel, spec, FeasibleSet.standard(spec), SolveOptions(max_iter=1, grad_tol=1e-14))
    assert not result.converged
    assert result.iterations == 1
    assert result.residual > 0


def test_ml_bernoulli_rate(make_panel):
    spec = ModelSpec(1, 1, 0)
    panel = make_panel(spec, 1000)
    result = estimate_ml(panel, spec, FeasibleSet(spec, (BasicPolytope(1e-3),)), TIGHT)
    assert result.beta_hat.values[0] == pytest.approx(panel.states().mean(), abs=1e-8)


def test_ml_category_frequencies(make_panel):
    spec = ModelSpec(2, 2, 0)
    panel = make_panel(spec, 900)
    result = estimate_ml(panel, spec, FeasibleSet(spec, (BasicPolytope(1e-3),)), TIGHT)
    states = panel.states()
    expected = np.array([[(states[:, k] == p).mean() for p in (1, 2)] for k in range(2)])
    assert np.allclose(result.beta_hat.baselines(), expected, atol=1e-7)


def test_ml_improves_on_ls(make_beta):
    spec = ModelSpec(2, 1, 2)
    truth = make_beta(spec, nonnegative=True)
    panel = simulate(spec, truth, SimConfig(N=4000, seed=21))
    feasible_set = FeasibleSet.standard(spec, rho=1e-3)
    ls = estimate_ls(panel, spec, feasible_set)
    ml = estimate_ml(panel, spec, feasible_set, ls_result=ls)
    assert ml.converged
    assert feasible_set.check_feasible(ml.beta_hat, tol=1e-7).feasible
    assert ml.objective_trace[-1] <= ml.objective_trace[0] + 1e-12


def test_ml_needs_positive_rho(make_panel):
    spec = ModelSpec(1, 1, 1)
    panel = make_panel(spec, 50)
    with pytest.raises(InitializationError):
        estimate_ml(panel, spec, FeasibleSet(spec, (BasicPolytope(0.0),)))
    with pytest.raises(InitializationError):
        estimate_ml(panel, spec, FeasibleSet(spec, (Box(0.0, 1.0),)))


def test_ml_rejects_nonlinear_link(make_panel):
    spec = ModelSpec(1, 1, 0, LinkFunction.SIGMOID)
    panel = make_panel(spec, 50)
    with pytest.raises(ValueError):
        estimate_ml(panel, spec, FeasibleSet(spec, (BasicPolytope(0.01),)))


def test_vi_identity_is_ls(make_panel):
    spec = ModelSpec(2, 1, 1)
    panel = make_panel(spec, 300)
    feasible_set = FeasibleSet.standard(spec)
    vi = estimate_vi(panel, spec, LinkFunction.IDENTITY, feasible_set)
    ls = estimate_ls(panel, spec, feasible_set)
    assert np.allclose(vi.beta_hat.values, ls.beta_hat.values, atol=1e-9)


def test_vi_sigmoid_recovers_logit_rate():
    spec = ModelSpec(1, 1, 0, LinkFunction.SIGMOID)
    truth = ParamVector(spec, [logit(0.3)])
    panel = simulate(spec, truth, SimConfig(N=20000, seed=4))
    result = estimate_vi(panel, spec, LinkFunction.SIGMOID, FeasibleSet(spec, (Box(-10.0, 10.0),)),
                         SolveOptions(grad_tol=1e-10))
    assert result.converged
    assert result.method == "vi-sigmoid"
    assert result.beta_hat.values[0] == pytest.approx(logit(panel.states().mean()), abs=1e-6)
    assert result.beta_hat.values[0] == pytest.approx(logit(0.3), abs=0.05)


def test_logistic_ml_scalar_rate(make_panel):
    spec = ModelSpec(1, 1, 0, LinkFunction.LOGISTIC)
    panel = make_panel(spec, 800)
    result = estimate_ml_logistic(panel, spec, FeasibleSet(spec, (Box(-10.0, 10.0),)), TIGHT)
    assert result.beta_hat.values[0] == pytest.approx(logit(panel.states().mean()), abs=1e-7)


def test_logistic_ml_matches_sklearn_probabilities():
    spec = ModelSpec(2, 2, 1, LinkFunction.LOGISTIC)
    rng = np.random.default_rng(3)
    truth = ParamVector(spec, rng.normal(-0.5, 0.4, spec.kappa))
    panel = simulate(spec, truth, SimConfig(N=3000, seed=8))
    result = estimate_ml_logistic(panel, spec, FeasibleSet(spec, (Box(-20.0, 20.0),)), SolveOptions(grad_tol=1e-9))
    assert result.converged

    design = build_design(panel)
    phi = design.phi.toarray()
    for k in range(spec.K):
        labels = panel.states()[:, k]
        reference = LogisticRegression(penalty=None, fit_intercept=False, max_iter=5000, tol=1e-10)
        reference.fit(phi, labels)
        ours = softmax(np.hstack([np.zeros((panel.N, 1)),
                                  phi @ result.beta_hat.blocks()[k]]), axis=1)
        # sklearn orders classes 0, 1, 2 like our (ground, categories) stacking
        assert np.allclose(reference.predict_proba(phi), ours, atol=1e-3)


@pytest.mark.slow
def test_single_state_desk_run():
    spec = ModelSpec(8, 1, 8)
    ls_errors, ml_errors = [], []
    for r in range(10):
        truth = generate_truth("single_state", spec, np.random.default_rng([7, r])).beta
        panel = simulate(spec, truth, SimConfig(N=10000, seed=1000 + r))
        feasible_set = FeasibleSet.standard(spec, rho=1e-4)
        ls = estimate_ls(panel, spec, feasible_set)
        ml = estimate_ml(panel, spec, feasible_set, ls_result=ls)
        ls_errors.append(relative(error_metrics(truth, ls.beta_hat), "all", "l2"))
        ml_errors.append(relative(error_metrics(truth, ml.beta_hat), "all", "l2"))
    assert 0.08 <= np.mean(ml_errors) <= 0.20
    assert 0.14 <= np.mean(ls_errors) <= 0.30
    assert np.mean(ml_errors) <= np.mean(ls_errors)


@pytest.mark.slow
def test_multi_state_desk_run():
    spec = ModelSpec(10, 2, 8)
    truth = generate_truth("multi_state", spec, np.random.default_rng(11), variant=1).beta
    panel = simulate(spec, truth, SimConfig(N=20000, seed=12))
    feasible_set = FeasibleSet.standard(spec, rho=1e-4, ground_mask=True)
    ml = estimate_ml(panel, spec, feasible_set)
    metrics = error_metrics(truth, ml.beta_hat)
    assert relative(metrics, "all", "l1") <= 0.10
    assert relative(metrics, "birth", "l1") < relative(metrics, "inter", "l1")


def test_ls_interior_matches_normal_equations_random_instances():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 3)))
        panel = EventPanel(spec, rng.integers(0, spec.M + 1, size=(600 + spec.d, spec.K)))
        feasible_set = FeasibleSet(spec, (Box(-10.0, 10.0), ZeroMask.ground(spec)))
        result = estimate_ls(panel, spec, feasible_set, TIGHT)
        assert result.converged, f"seed {seed}"

        stats = accumulate(panel)
        free = feasible_set.free_mask().reshape(spec.K, -1)
        blocks = stats.gram_blocks(feasible_set.free_mask())
        expected = np.zeros((spec.K, spec.block_size))
        for k in range(spec.K):
            expected[k, free[k]] = np.linalg.solve(blocks[k], stats.moments[k].reshape(-1)[free[k]])
        assert np.max(np.abs(result.beta_hat.values - expected.reshape(-1))) <= 1e-7, f"seed {seed}"


def test_extragradient_residuals_fall_to_tolerance(make_panel):
    spec = ModelSpec(2, 1, 1, LinkFunction.SIGMOID)
    panel = make_panel(spec, 1500)
    design = build_design(panel)
    feasible_set = FeasibleSet(spec, (Box(-10.0, 10.0), ZeroMask.ground(spec)))

    def fld(x):
        return block_field(design, 0, x, LinkFunction.SIGMOID)

    def project(x):
        return feasible_set.project_block(0, x)

    x0 = project(np.zeros(spec.block_size))
    tol = 1e-8
    trace = extragradient(fld, project, x0, 1.0, tol=tol)
    assert trace.converged
    residuals = np.array(trace.residuals)
    assert residuals[-1] <= tol
    assert residuals[-1] < residuals[0]
    # the tail stays well below the starting residual
    tail = residuals[len(residuals) // 2:]
    assert tail.max() < residuals[0]


def test_logistic_ml_agrees_with_sigmoid_vi(make_panel):
    spec = ModelSpec(2, 1, 1, LinkFunction.SIGMOID)
    panel = make_panel(spec, 1500)
    feasible_set = FeasibleSet(spec, (Box(-10.0, 10.0), ZeroMask.ground(spec)))
    options = SolveOptions(grad_tol=1e-10)
    ml = estimate_ml_logistic(panel, spec, feasible_set, options)
    vi = estimate_vi(panel, spec, LinkFunction.SIGMOID, feasible_set, options)
    assert ml.converged and vi.converged
    assert np.allclose(ml.beta_hat.values, vi.beta_hat.values, atol=1e-6)
