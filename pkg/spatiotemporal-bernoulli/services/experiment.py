"""
Experiment harness: seeded synthetic studies, frequency validation and
memory-depth selection.

A run draws true parameters for every replication, simulates a panel,
fits each configured estimator and records error metrics, support recovery
(network scenario), held-out frequency distances and, for the first
replication, coordinate confidence intervals.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from config import get_settings
from errors import BernoulliError, ConfigError
from models.constraints import (
    Atom,
    BasicPolytope,
    Box,
    FeasibleSet,
    LocalityMask,
    NonnegativeInteractions,
    ShapeMonotoneConvex,
    ZeroMask,
)
from models.estimate import (
    DEFAULT_RHO,
    EstimateResult,
    SolveOptions,
    estimate_ls,
    estimate_ml,
    estimate_ml_logistic,
    estimate_vi,
)
from models.model import EventPanel, ModelSpec
from models.simulate import SimConfig, frequency_report, simulate
from models.stats import accumulate
from models.uncertainty import ConfidenceProgram, coverage_level, coverage_y
from services.analytics import error_metrics, frequency_distance, support_recovery
from services.scenarios import SCENARIOS, generate_truth

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ESTIMATORS = ("ls", "ml", "ml-logistic", "vi")
ATOMS = ("basic", "box", "ground_mask", "zero_mask", "locality", "shape",
         "nonnegative_interactions", "known_graph")
CONFIG_KEYS = {
    "schema_version", "name", "scenario", "scenario_options", "model", "seed", "N",
    "replications", "estimators", "rho", "constraints", "solver", "confidence",
    "frequency_validation", "output_dir", "n_jobs",
}
REQUIRED_KEYS = ("name", "scenario", "model", "seed", "N")
SOLVER_KEYS = {"max_iter", "grad_tol", "step_rule", "restart"}
FAILURES = (BernoulliError, ValueError, ArithmeticError)


# ==============================
# CONFIGURATION
# ==============================

@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    scenario: str
    model: ModelSpec
    seed: int
    N: int
    replications: int = 1
    estimators: Tuple[str, ...] = ("ls", "ml")
    rho: float = DEFAULT_RHO
    constraints: Tuple[dict, ...] = ({"atom": "basic"},)
    scenario_options: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    confidence: Optional[dict] = None
    frequency_validation: bool = False
    output_dir: str = "outputs"
    n_jobs: int = 1

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        """
        Validate and build a config

        Raises:
            ConfigError: on unknown keys, missing keys, wrong schema version or bad values
        """
        if not isinstance(payload, dict):
            raise ConfigError(f"Experiment config must be an object, got {type(payload).__name__}")
        version = payload.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
        unknown = sorted(set(payload) - CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        missing = [key for key in REQUIRED_KEYS if key not in payload]
        if missing:
            raise ConfigError(f"Missing config keys: {missing}")
        if payload["scenario"] not in SCENARIOS:
            raise ConfigError(f"Unknown scenario {payload['scenario']!r}, expected one of {SCENARIOS}")

        try:
            model = ModelSpec.from_dict(payload["model"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid model block {payload['model']!r}: {e}") from e

        estimators = tuple(payload.get("estimators", ("ls", "ml")))
        bad = [e for e in estimators if e not in ESTIMATORS]
        if bad or not estimators:
            raise ConfigError(f"Unknown estimators {bad}, expected a subset of {ESTIMATORS}")

        constraints = tuple(payload.get("constraints", ({"atom": "basic"},)))
        for decl in constraints:
            if not isinstance(decl, dict) or decl.get("atom") not in ATOMS:
                raise ConfigError(f"Invalid constraint declaration {decl!r}, atoms are {ATOMS}")
            if decl["atom"] == "known_graph" and payload["scenario"] != "network":
                raise ConfigError("known_graph constraint is only defined for the network scenario")

        solver = dict(payload.get("solver", {}))
        if set(solver) - SOLVER_KEYS:
            raise ConfigError(f"Unknown solver keys: {sorted(set(solver) - SOLVER_KEYS)}")

        confidence = payload.get("confidence")
        if confidence is not None and not ({"y", "level"} & set(confidence)):
            raise ConfigError(f"confidence needs 'y' or 'level', got {confidence!r}")

        try:
            config = cls(
                name=str(payload["name"]),
                scenario=payload["scenario"],
                model=model,
                seed=int(payload["seed"]),
                N=int(payload["N"]),
                replications=int(payload.get("replications", 1)),
                estimators=estimators,
                rho=float(payload.get("rho", DEFAULT_RHO)),
                constraints=constraints,
                scenario_options=dict(payload.get("scenario_options", {})),
                solver=solver,
                confidence=dict(confidence) if confidence is not None else None,
                frequency_validation=bool(payload.get("frequency_validation", False)),
                output_dir=str(payload.get("output_dir", get_settings().output_dir)),
                n_jobs=int(payload.get("n_jobs", 1)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config value: {e}") from e
        if config.N < 1 or config.replications < 0:
            raise ConfigError(f"N must be >= 1 and replications >= 0, got N={config.N}, "
                              f"replications={config.replications}")
        if not 0.0 < config.rho < 0.5:
            raise ConfigError(f"rho must lie in (0, 0.5), got {config.rho}")
        return config

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "scenario": self.scenario,
            "scenario_options": self.scenario_options,
            "model": self.model.to_dict(),
            "seed": self.seed,
            "N": self.N,
            "replications": self.replications,
            "estimators": list(self.estimators),
            "rho": self.rho,
            "constraints": [dict(c) for c in self.constraints],
            "solver": self.solver,
            "confidence": self.confidence,
            "frequency_validation": self.frequency_validation,
            "output_dir": self.output_dir,
            "n_jobs": self.n_jobs,
        }

    def solve_options(self) -> SolveOptions:
        return SolveOptions(**self.solver)


def build_feasible_set(spec: ModelSpec, declarations: Sequence[dict],
                       edges: Optional[frozenset] = None) -> FeasibleSet:
    """
    Turn ordered atom declarations into a FeasibleSet.

    A basic polytope is prepended when none is declared so the set stays bounded.
    """
    atoms: List[Atom] = []
    for decl in declarations:
        name = decl.get("atom")
        if name == "basic":
            atoms.append(BasicPolytope(float(decl.get("rho", 0.0))))
        elif name == "box":
            atoms.append(Box(decl.get("lower", -np.inf), decl.get("upper", np.inf)))
        elif name == "ground_mask":
            atoms.append(ZeroMask.ground(spec))
        elif name == "zero_mask":
            atoms.append(ZeroMask(tuple(int(i) for i in decl.get("slots", ()))))
        elif name == "locality":
            atoms.append(LocalityMask(int(decl.get("radius", 1))))
        elif name == "shape":
            atoms.append(ShapeMonotoneConvex())
        elif name == "nonnegative_interactions":
            atoms.append(NonnegativeInteractions())
        elif name == "known_graph":
            if edges is None:
                raise ConfigError("known_graph needs the generated edge set")
            non_edges = [(k, ell) for k in range(1, spec.K + 1) for ell in range(1, spec.K + 1)
                         if (k, ell) not in edges]
            atoms.append(ZeroMask.pairs(spec, non_edges))
        else:
            raise ConfigError(f"Unknown constraint atom {name!r}, expected one of {ATOMS}")
    if not any(isinstance(a, BasicPolytope) for a in atoms):
        atoms.insert(0, BasicPolytope(0.0))
    return FeasibleSet(spec, tuple(atoms))


def run_estimator(name: str, panel: EventPanel, feasible_set: FeasibleSet, rho: float = DEFAULT_RHO,
                  options: Optional[SolveOptions] = None,
                  ls_result: Optional[EstimateResult] = None) -> EstimateResult:
    spec = panel.spec
    if name == "ls":
        return estimate_ls(panel, spec, feasible_set, options)
    if name == "ml":
        strengthened = feasible_set.with_rho(max(rho, feasible_set.rho or 0.0))
        return estimate_ml(panel, spec, strengthened, options, ls_result=ls_result)
    if name == "ml-logistic":
        return estimate_ml_logistic(panel, spec, feasible_set, options)
    if name == "vi":
        return estimate_vi(panel, spec, spec.link, feasible_set, options)
    raise ValueError(f"Unknown estimator {name!r}, expected one of {ESTIMATORS}")


# ==============================
# FREQUENCY VALIDATION / DEPTH SELECTION
# ==============================

def _holdout_score(omega: np.ndarray, spec: ModelSpec, n_test: int, estimator: str,
                   feasible_set: FeasibleSet, seed: int, rho: float,
                   options: Optional[SolveOptions]) -> float:
    """
    Fit on the rows before the last n_test, simulate n_test synthetic steps
    from the last d training rows and compare frequency matrices.
    """
    train_rows = omega.shape[0] - n_test
    if train_rows <= spec.d:
        raise ValueError(f"Training part has {train_rows} rows, need more than d={spec.d}")
    train = EventPanel(spec, omega[:train_rows])
    result = run_estimator(estimator, train, feasible_set, rho, options)
    window = omega[train_rows - spec.d:train_rows]
    # estimates are feasible up to the projection tolerance
    synthetic = simulate(spec, result.beta_hat, SimConfig(n_test, seed, window), tol=1e-7)
    held_out = EventPanel(spec, omega[train_rows - spec.d:])
    return frequency_distance(frequency_report(synthetic), frequency_report(held_out))


def _test_length(panel: EventPanel, split_fraction: float) -> int:
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    return max(1, int(round((1.0 - split_fraction) * panel.N)))


def frequency_validation(panel: EventPanel, estimator: str, feasible_set: FeasibleSet, seed: int,
                         split_fraction: float = 0.5, rho: float = DEFAULT_RHO,
                         options: Optional[SolveOptions] = None) -> float:
    """l1 distance between held-out and synthetic frequency matrices"""
    return _holdout_score(panel.omega, panel.spec, _test_length(panel, split_fraction), estimator,
                          feasible_set, seed, rho, options)


@dataclass(frozen=True)
class DepthSelection:
    chosen: int
    scores: Dict[int, float]
    flagged: Tuple[int, ...] = ()


def cross_validate_depth(panel: EventPanel, candidate_depths: Sequence[int], estimator: str = "ls",
                         split_fraction: float = 0.5, seed: int = 0,
                         constraints: Optional[Sequence[dict]] = None, rho: float = DEFAULT_RHO,
                         options: Optional[SolveOptions] = None) -> DepthSelection:
    """
    Choose the memory depth whose fitted model best reproduces held-out
    event frequencies

    Every candidate is scored on the same held-out rows. A candidate whose
    fit or simulation fails scores +inf and is flagged. Ties go to the
    smaller depth.

    Args:
        panel: observed panel (its own depth only sets the initial rows)
        candidate_depths: depths to compare
        estimator: "ls" or "ml"
        split_fraction: share of the horizon used for fitting
        seed: seed of the synthetic continuation
        constraints: atom declarations; ground mask for M=1 when None
        rho: likelihood margin for "ml"

    Returns:
        DepthSelection with the full score table
    """
    depths = sorted(set(int(d) for d in candidate_depths))
    if not depths or depths[0] < 0:
        raise ValueError(f"Need at least one depth >= 0, got {list(candidate_depths)}")
    n_test = _test_length(panel, split_fraction)
    base = panel.spec
    scores: Dict[int, float] = {}
    flagged: List[int] = []
    for d in depths:
        spec = ModelSpec(base.K, base.M, d, base.link)
        try:
            if constraints is None:
                feasible_set = FeasibleSet.standard(spec)
            else:
                feasible_set = build_feasible_set(spec, constraints)
            scores[d] = _holdout_score(panel.omega, spec, n_test, estimator, feasible_set, seed, rho, options)
        except FAILURES as e:
            logger.warning("Depth %d flagged: %s", d, e)
            scores[d] = math.inf
            flagged.append(d)
        logger.info("Depth %d: frequency score %.6f", d, scores[d])
    best = min(scores.values())
    chosen = next(d for d in depths if scores[d] == best)
    return DepthSelection(chosen, scores, tuple(flagged))


# ==============================
# EXPERIMENT RUNS
# ==============================

def _finite(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


@dataclass
class ReplicationRecord:
    replication: int
    seed: int
    metrics: List[dict] = field(default_factory=list)
    converged: Dict[str, bool] = field(default_factory=dict)
    iterations: Dict[str, int] = field(default_factory=dict)
    residuals: Dict[str, float] = field(default_factory=dict)
    support: Dict[str, dict] = field(default_factory=dict)
    frequency: Dict[str, Optional[float]] = field(default_factory=dict)
    intervals: List[dict] = field(default_factory=list)
    coverage: Optional[float] = None
    truth: Optional[List[float]] = None
    estimates: Dict[str, List[float]] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ReplicationRecord":
        return cls(**payload)


@dataclass
class ExperimentBundle:
    config: dict
    records: List[ReplicationRecord] = field(default_factory=list)

    @property
    def name(self) -> str:
        return str(self.config.get("name", "experiment"))

    def metrics_frame(self) -> pd.DataFrame:
        columns = ["replication", "estimator", "part", "norm", "absolute", "relative"]
        rows = [{"replication": r.replication, **m} for r in self.records for m in r.metrics]
        return pd.DataFrame(rows, columns=columns)

    def summary(self) -> pd.DataFrame:
        """Mean absolute / relative error per (estimator, part, norm)."""
        frame = self.metrics_frame()
        columns = ["estimator", "part", "norm", "absolute", "relative", "replications"]
        if frame.empty:
            return pd.DataFrame(columns=columns)
        frame["relative"] = pd.to_numeric(frame["relative"], errors="coerce")
        grouped = frame.groupby(["estimator", "part", "norm"], sort=True)
        summary = grouped[["absolute", "relative"]].mean()
        summary["replications"] = grouped.size()
        return summary.reset_index()[columns]

    def runs_frame(self) -> pd.DataFrame:
        columns = ["replication", "seed", "estimator", "converged", "iterations", "residual",
                   "frequency_distance", "support_exact", "support_missed", "support_spurious", "error"]
        rows = []
        for r in self.records:
            names = sorted(r.converged) or [None]
            for name in names:
                support = r.support.get(name, {}) if name else {}
                rows.append({
                    "replication": r.replication,
                    "seed": r.seed,
                    "estimator": name,
                    "converged": r.converged.get(name) if name else None,
                    "iterations": r.iterations.get(name) if name else None,
                    "residual": r.residuals.get(name) if name else None,
                    "frequency_distance": r.frequency.get(name) if name else None,
                    "support_exact": support.get("exact"),
                    "support_missed": support.get("missed"),
                    "support_spurious": support.get("spurious"),
                    "error": r.error,
                })
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self) -> dict:
        return {"config": self.config, "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentBundle":
        return cls(payload["config"], [ReplicationRecord.from_dict(r) for r in payload.get("records", [])])

    @classmethod
    def from_json(cls, path) -> "ExperimentBundle":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _replication_seeds(seed: int, replication: int) -> Tuple[np.random.Generator, int]:
    truth_seq, sim_seq = np.random.SeedSequence([seed, replication]).spawn(2)
    return np.random.default_rng(truth_seq), int(sim_seq.generate_state(1, dtype=np.uint64)[0])


def _confidence_y(confidence: dict, kappa: int, N: int) -> float:
    if "y" in confidence:
        return float(confidence["y"])
    return coverage_y(float(confidence["level"]), kappa, N)


def run_replication(config: ExperimentConfig, replication: int) -> ReplicationRecord:
    """One seeded replication; failures are recorded on the returned record."""
    spec = config.model
    rng, sim_seed = _replication_seeds(config.seed, replication)
    record = ReplicationRecord(replication=replication, seed=sim_seed)
    options = config.solve_options()
    try:
        truth = generate_truth(config.scenario, spec, rng, **config.scenario_options)
        panel = simulate(spec, truth.beta, SimConfig(config.N, sim_seed))
        feasible_set = build_feasible_set(spec, config.constraints, truth.edges)
        keep_vectors = replication == 0
        if keep_vectors:
            record.truth = truth.beta.values.tolist()

        ls_result = None
        for name in config.estimators:
            result = run_estimator(name, panel, feasible_set, config.rho, options, ls_result=ls_result)
            if name == "ls":
                ls_result = result
            record.converged[name] = result.converged
            record.iterations[name] = result.iterations
            record.residuals[name] = _finite(result.residual)
            record.metrics.extend({"estimator": name, **row} for row in error_metrics(truth.beta, result.beta_hat))
            if truth.edges is not None:
                record.support[name] = support_recovery(result.beta_hat, truth.edges)
            if keep_vectors:
                record.estimates[name] = result.beta_hat.values.tolist()
            if config.frequency_validation:
                record.frequency[name] = _finite(
                    frequency_validation(panel, name, feasible_set, sim_seed + 1, rho=config.rho, options=options)
                )

        if config.confidence is not None and keep_vectors:
            stats = accumulate(panel, spec)
            y = _confidence_y(config.confidence, spec.kappa, config.N)
            program = ConfidenceProgram(stats, feasible_set, y)
            record.coverage = coverage_level(y, spec.kappa, config.N)
            record.intervals = [
                {"lower": _finite(ci.lower), "upper": _finite(ci.upper), "feasible": ci.feasible,
                 "zero_moment_slots": ci.zero_moment_slots}
                for ci in program.coordinate_intervals()
            ]
    except FAILURES as e:
        record.error = f"{type(e).__name__}: {e}"
        logger.warning("Replication %d failed: %s", replication, record.error)
    return record


def run_experiment(config: ExperimentConfig, progress: bool = True) -> ExperimentBundle:
    """
    Run every replication of an experiment

    Replications are independent and seeded from (seed, replication), so the
    bundle does not depend on n_jobs.
    """
    logger.info("Running experiment '%s': %s, %s, N=%d, %d replication(s)",
                config.name, config.scenario, config.model, config.N, config.replications)
    indices = range(config.replications)
    if config.n_jobs == 1:
        iterator = tqdm(indices, desc=config.name, disable=None if progress else True)
        records = [run_replication(config, r) for r in iterator]
    else:
        records = Parallel(n_jobs=config.n_jobs)(delayed(run_replication)(config, r) for r in indices)
    failed = sum(r.error is not None for r in records)
    if failed:
        logger.warning("%d of %d replications failed", failed, len(records))
    return ExperimentBundle(config.to_dict(), list(records))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return ExperimentConfig.from_json(path)
