"""
Command-line entry point.

    python app.py simulate   --scenario single_state --K 8 --M 1 --d 8 --N 10000 --seed 1 --output panel.bpnl
    python app.py estimate   --panel panel.bpnl --method ml --output beta.json
    python app.py bounds     --panel panel.bpnl --epsilon 0.05
    python app.py confint    --panel panel.bpnl --level 0.9 --output intervals.csv
    python app.py experiment --config configs/single_state.json --seed 1
    python app.py ingest     --events events.csv --grid configs/grid_example.json --depth 6 --output panel.bpnl
    python app.py cvdepth    --panel panel.bpnl --depths 1 2 4 6 8 --seed 1
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import joblib
import numpy as np
import pandas as pd

from config import get_settings
from data.ingest import GridSpec, ingest_events
from data.serialize import load_panel, load_params, save_panel, save_params
from errors import BernoulliError, ConditionError, ConfigError
from models.constraints import FeasibleSet
from models.estimate import DEFAULT_RHO, SolveOptions
from models.model import LinkFunction, ModelSpec, param_coordinate
from models.simulate import SimConfig, frequency_report, simulate
from models.stats import accumulate
from models.uncertainty import ConfidenceProgram, coverage_level, coverage_y, deviation_bound, risk_bound, theta_p
from services.experiment import (
    ESTIMATORS,
    ExperimentConfig,
    build_feasible_set,
    cross_validate_depth,
    load_config,
    run_estimator,
    run_experiment,
)
from services.report import FORMATS, emit_report
from services.scenarios import SCENARIOS, generate_truth

logger = logging.getLogger("bernoulli")


# ==============================
# CONSOLE HELPERS
# ==============================

def _banner(title: str):
    print("=" * 80)
    print(title)
    print("=" * 80)


def _step(i: int, n: int, message: str):
    print(f"\n[{i}/{n}] {message}")


def _write_json(payload: dict, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _finite(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _feasible_set(spec: ModelSpec, constraints: Optional[str]) -> FeasibleSet:
    """Atom declarations from a JSON file, or the standard set."""
    if constraints is None:
        return FeasibleSet.standard(spec)
    try:
        payload = json.loads(Path(constraints).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read constraints from {constraints}: {e}") from e
    if isinstance(payload, dict):
        payload = payload.get("constraints", [])
    return build_feasible_set(spec, payload)


def _solve_options(args) -> SolveOptions:
    return SolveOptions(max_iter=args.max_iter, grad_tol=args.grad_tol, n_jobs=args.n_jobs)


# ==============================
# VERBS
# ==============================

def cmd_simulate(args) -> int:
    _banner("SIMULATE EVENT PANEL")
    _step(1, 3, "Preparing parameters...")
    if args.params:
        beta = load_params(args.params)
        spec = beta.spec
        print(f"✅ Loaded parameters for {spec}")
    else:
        if args.scenario is None or None in (args.K, args.M, args.d):
            raise ConfigError("simulate needs --params, or --scenario with --K, --M and --d")
        spec = ModelSpec(args.K, args.M, args.d, LinkFunction(args.link))
        truth = generate_truth(args.scenario, spec, np.random.default_rng(args.seed))
        beta = truth.beta
        print(f"✅ Generated {args.scenario} parameters for {spec}")
        if args.params_output:
            save_params(beta, args.params_output)
            print(f"   True parameters saved to: {args.params_output}")

    _step(2, 3, f"Simulating N={args.N} steps (seed={args.seed})...")
    panel = simulate(spec, beta, SimConfig(args.N, args.seed))
    freq = frequency_report(panel)
    print(f"✅ Mean event frequency per category: {np.round(freq.mean(axis=0), 4).tolist()}")

    _step(3, 3, "Saving panel...")
    save_panel(panel, args.output)
    print(f"✅ Panel saved to: {args.output}")
    return 0


def cmd_estimate(args) -> int:
    _banner("ESTIMATE PARAMETERS")
    _step(1, 3, "Loading panel...")
    panel = load_panel(args.panel, link=LinkFunction(args.link))
    spec = panel.spec
    feasible_set = _feasible_set(spec, args.constraints)
    print(f"✅ {spec}, N={panel.N}, {len(feasible_set.atoms)} constraint atom(s)")

    _step(2, 3, f"Running {args.method.upper()} estimator...")
    result = run_estimator(args.method, panel, feasible_set, args.rho, _solve_options(args))
    status = "✅ Converged" if result.converged else "⚠️  Not converged"
    print(f"{status}: {result.iterations} iterations, residual {result.residual:.3e}")
    if any(result.block_degenerate):
        print(f"⚠️  Singular Gram at {sum(result.block_degenerate)} location(s)")

    _step(3, 3, "Saving results...")
    save_params(result.beta_hat, args.output)
    print(f"✅ Estimate saved to: {args.output}")
    if args.bundle:
        joblib.dump({
            "spec": spec.to_dict(),
            "method": result.method,
            "result": result,
            "constraints": [type(a).__name__ for a in feasible_set.atoms],
        }, args.bundle)
        print(f"✅ Result bundle saved to: {args.bundle}")
    return 0


def cmd_bounds(args) -> int:
    _banner("ERROR BOUNDS")
    _step(1, 3, "Accumulating statistics...")
    panel = load_panel(args.panel)
    spec = panel.spec
    feasible_set = _feasible_set(spec, args.constraints)
    stats = accumulate(panel)
    blocks = stats.gram_blocks(feasible_set.free_mask())
    print(f"✅ {spec}, N={panel.N}, kappa={spec.kappa}")

    _step(2, 3, "Computing condition numbers...")
    thetas = {}
    for p in ("2", "inf", "1"):
        try:
            thetas[p] = theta_p(blocks, p, seed=args.seed)
        except ConditionError as e:
            print(f"⚠️  theta_{p}: {e}")
    for p, theta in thetas.items():
        kind = "lower bound" if theta.is_lower_bound else "value"
        print(f"   theta_{p:<3s} {kind}: {theta.value:.6g}")

    _step(3, 3, "Computing deviation and risk bounds...")
    deviation = deviation_bound(panel.N, spec.kappa, args.epsilon)
    payload = {
        "spec": spec.to_dict(),
        "N": panel.N,
        "kappa": spec.kappa,
        "epsilon": args.epsilon,
        "deviation": deviation.delta_inf,
        "theta": {p: {"value": _finite(t.value), "lower_bound": t.is_lower_bound} for p, t in thetas.items()},
        "risk": {},
    }
    print(f"   deviation bound: {deviation.delta_inf:.6g}")
    if "1" in thetas:
        for p in ("1", "2", "inf"):
            bound = risk_bound(blocks, panel.N, spec.kappa, args.epsilon, p, theta_1=thetas["1"])
            payload["risk"][p] = _finite(bound.value)
            print(f"   risk bound (l_{p}): {bound.value:.6g}")
    if args.output:
        _write_json(payload, args.output)
        print(f"✅ Bounds saved to: {args.output}")
    return 0


def cmd_confint(args) -> int:
    _banner("CONFIDENCE INTERVALS")
    _step(1, 3, "Accumulating statistics...")
    panel = load_panel(args.panel)
    spec = panel.spec
    feasible_set = _feasible_set(spec, args.constraints)
    stats = accumulate(panel)
    if args.y is not None:
        y = args.y
    elif args.level is not None:
        y = coverage_y(args.level, spec.kappa, panel.N)
    else:
        raise ConfigError("confint needs --y or --level")
    level = coverage_level(y, spec.kappa, panel.N)
    print(f"✅ y={y:.4f}, simultaneous coverage level {level:.4f}")

    _step(2, 3, "Solving interval programs...")
    program = ConfidenceProgram(stats, feasible_set, y)
    coordinates = args.coordinate if args.coordinate else range(spec.kappa)
    rows = []
    eye = np.zeros(spec.kappa)
    for index in coordinates:
        coord = param_coordinate(spec, index)
        e = eye.copy()
        e[index] = 1.0
        ci = program.interval(e)
        rows.append({"index": index, "k": coord.k, "p": coord.p, "ell": coord.ell, "s": coord.s, "q": coord.q,
                     "lower": ci.lower, "upper": ci.upper, "feasible": ci.feasible})
    frame = pd.DataFrame(rows, columns=["index", "k", "p", "ell", "s", "q", "lower", "upper", "feasible"])
    infeasible = int((~frame["feasible"]).sum()) if len(frame) else 0
    if infeasible:
        print(f"⚠️  {infeasible} interval program(s) infeasible")
    if program.zero_moment_slots:
        print(f"⚠️  {program.zero_moment_slots} coordinate(s) with zero empirical moment")
    print(f"✅ {len(frame)} interval(s) computed")

    _step(3, 3, "Saving intervals...")
    if args.output:
        frame.to_csv(args.output, index=False, lineterminator="\n")
        print(f"✅ Intervals saved to: {args.output}")
    else:
        print(frame.to_string(index=False))
    return 0


def cmd_experiment(args) -> int:
    _banner("RUN EXPERIMENT")
    _step(1, 3, "Loading configuration...")
    config = load_config(args.config)
    overrides = {"seed": args.seed}
    if args.n_jobs is not None:
        overrides["n_jobs"] = args.n_jobs
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})
    print(f"✅ {config.name}: {config.scenario}, {config.model}, N={config.N}, "
          f"{config.replications} replication(s), estimators {list(config.estimators)}")

    _step(2, 3, "Running replications...")
    bundle = run_experiment(config)
    failed = [r for r in bundle.records if r.error]
    if failed:
        print(f"⚠️  {len(failed)} replication(s) failed; first: {failed[0].error}")
    summary = bundle.summary()
    if not summary.empty:
        print(summary[(summary["part"] == "all")].to_string(index=False))

    _step(3, 3, "Writing report...")
    paths = emit_report(bundle, config.output_dir, args.format, figures=not args.no_figures)
    for path in paths:
        print(f"   {path}")
    print(f"✅ Report written to: {config.output_dir}")
    return 0


def cmd_ingest(args) -> int:
    _banner("INGEST EVENTS")
    _step(1, 2, "Binning events...")
    grid = GridSpec.from_json(args.grid)
    panel, report = ingest_events(args.events, grid, depth=args.depth)
    print(f"✅ {report.total_rows} rows: kept {report.kept}, collisions {report.collisions}, "
          f"out of box {report.out_of_box}, outside window {report.outside_window}")
    print(f"   {panel.spec}, {report.n_bins} time bins")

    _step(2, 2, "Saving panel...")
    save_panel(panel, args.output)
    print(f"✅ Panel saved to: {args.output}")
    if args.report:
        _write_json({**asdict(report), "spec": panel.spec.to_dict()}, args.report)
        print(f"✅ Binning report saved to: {args.report}")
    return 0


def cmd_cvdepth(args) -> int:
    _banner("MEMORY DEPTH SELECTION")
    _step(1, 2, "Scoring candidate depths...")
    panel = load_panel(args.panel)
    selection = cross_validate_depth(panel, args.depths, estimator=args.estimator,
                                     split_fraction=args.split, seed=args.seed, rho=args.rho)
    for d, score in sorted(selection.scores.items()):
        mark = "⚠️ " if d in selection.flagged else "  "
        print(f" {mark} d={d:<3d} score={score:.6f}")

    _step(2, 2, "Result")
    print(f"✅ Chosen depth: {selection.chosen}")
    if args.output:
        _write_json({
            "chosen": selection.chosen,
            "scores": {str(d): _finite(s) for d, s in sorted(selection.scores.items())},
            "flagged": list(selection.flagged),
        }, args.output)
        print(f"✅ Scores saved to: {args.output}")
    return 0


# ==============================
# PARSER
# ==============================

def _add_solver_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--max-iter", type=int, default=50000)
    parser.add_argument("--grad-tol", type=float, default=None)
    parser.add_argument("--rho", type=float, default=DEFAULT_RHO)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="bernoulli", description="Spatio-temporal Bernoulli process toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="simulate a panel from parameters or a scenario")
    p.add_argument("--params")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--K", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--link", choices=[link.value for link in LinkFunction], default="identity")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--params-output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit parameters to a panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--method", choices=ESTIMATORS, default="ls")
    p.add_argument("--link", choices=[link.value for link in LinkFunction], default="identity")
    p.add_argument("--constraints")
    p.add_argument("--output", required=True)
    p.add_argument("--bundle")
    p.add_argument("--n-jobs", type=int, default=settings.n_jobs)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bounds", help="condition numbers, deviation and risk bounds")
    p.add_argument("--panel", required=True)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--constraints")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("confint", help="confidence intervals for parameter coordinates")
    p.add_argument("--panel", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--y", type=float)
    group.add_argument("--level", type=float)
    p.add_argument("--coordinate", type=int, action="append")
    p.add_argument("--constraints")
    p.add_argument("--output")
    p.set_defaults(func=cmd_confint)

    p = sub.add_parser("experiment", help="run a configured synthetic study")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output-dir")
    p.add_argument("--format", nargs="+", choices=FORMATS, default=["csv", "json"])
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--n-jobs", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ingest", help="bin an event CSV onto a grid")
    p.add_argument("--events", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--depth", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cvdepth", help="choose the memory depth by held-out frequencies")
    p.add_argument("--panel", required=True)
    p.add_argument("--depths", type=int, nargs="+", required=True)
    p.add_argument("--estimator", choices=("ls", "ml"), default="ls")
    p.add_argument("--split", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_cvdepth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BernoulliError as e:
        print(f"❌ Error: {e}")
        return 1
    except ValueError as e:
        print(f"❌ Invalid input: {e}")
        return 1
    except OSError as e:
        print(f"❌ I/O error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
