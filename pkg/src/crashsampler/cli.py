"""Command-line interface.

Subcommands: ground-truth (build and persist the exhaustive outcome table),
run (single experiment to a trace CSV), evaluate (repeated experiments to an
RMSE CSV), compare (named comparison suites), plot (RMSE CSV to an SVG chart).

Exit codes: 0 ok, 1 configuration error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, MonotonicityViolation, SimulationFault
from .grid import (DecelPMF, GlancePMF, GridConfig, PrototypeEvent, ScenarioGrid,
                   build_grid, save_grid)
from .harness import (ExperimentConfig, SUITES, default_checkpoints, evaluate_rmse,
                      run_experiment, suite_configs, to_rmse_csv, trace_to_csv)
from .simulator import (InjuryRiskParams, SimParams, TARGETS, build_ground_truth,
                        ground_truth_to_csv)
from .stopping import StoppingRule


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def grid_from_config(doc: dict, sim: SimParams) -> ScenarioGrid:
    g = doc.get("grid", {})
    config = GridConfig(
        n_events=int(g.get("n_events", GridConfig.n_events)),
        oeoff_levels=tuple(g["oeoff_levels"]) if "oeoff_levels" in g else GridConfig.oeoff_levels,
        decel_levels=tuple(g["decel_levels"]) if "decel_levels" in g else GridConfig.decel_levels,
        rng_seed=int(g.get("rng_seed", GridConfig.rng_seed)),
    )
    glance = GlancePMF(np.asarray(g["glance_pmf"], dtype=float)) if "glance_pmf" in g else None
    decel = DecelPMF(np.asarray(g["decel_pmf"], dtype=float)) if "decel_pmf" in g else None
    events = [PrototypeEvent(**ev) for ev in g["events"]] if "events" in g else None
    return build_grid(config, glance_pmf=glance, decel_pmf=decel, sim_params=sim,
                      events=events)


def sim_params_from_config(doc: dict) -> SimParams:
    s = dict(doc.get("sim", {}))
    injury = InjuryRiskParams(**s.pop("injury")) if "injury" in s else InjuryRiskParams()
    try:
        return SimParams(injury=injury, **s)
    except TypeError as exc:
        raise ConfigError(f"bad sim section: {exc}") from exc


def _stopping_from_args(args) -> tuple:
    rules = []
    if args.budget is not None:
        rules.append(StoppingRule("budget", args.budget))
    if args.max_iterations is not None:
        rules.append(StoppingRule("max_iterations", args.max_iterations))
    if getattr(args, "se_threshold", None) is not None:
        rules.append(StoppingRule("absolute_se", args.se_threshold))
    if getattr(args, "rope", None) is not None:
        rules.append(StoppingRule("rope", args.rope))
    if getattr(args, "cv", None) is not None:
        rules.append(StoppingRule("cv", args.cv))
    return tuple(rules)


def _add_experiment_flags(p: argparse.ArgumentParser, require_seed: bool):
    p.add_argument("--method", required=True, choices=("density", "severity", "active"))
    p.add_argument("--target", default="speed_reduction", choices=TARGETS)
    p.add_argument("--assr", action="store_true", help="enable sample space reduction")
    p.add_argument("--stratified", action="store_true")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--budget", type=float, default=None, help="max simulator invocations")
    p.add_argument("--max-iterations", type=float, default=None)
    p.add_argument("--se-threshold", type=float, default=None)
    p.add_argument("--rope", type=float, default=None, help="CI half-width threshold")
    p.add_argument("--cv", type=float, default=None, help="coefficient of variation, percent")
    p.add_argument("--seed", type=int, required=require_seed)
    p.add_argument("--config", default=None, help="JSON config file (grid/sim sections)")


def _load_env(args):
    doc = load_config_file(args.config) if args.config else {}
    sim = sim_params_from_config(doc)
    grid = grid_from_config(doc, sim)
    return grid, sim


def cmd_ground_truth(args) -> int:
    grid, sim = _load_env(args)
    gt = build_ground_truth(grid, sim)
    ground_truth_to_csv(gt, grid, args.out)
    if args.grid_json:
        save_grid(grid, args.grid_json)
    print(f"wrote {gt.n_enumerated} outcomes ({grid.n_cells} cells x 2) to {args.out}")
    return 0


def _experiment_config(args, grid) -> ExperimentConfig:
    stopping = _stopping_from_args(args)
    if not any(r.kind in ("budget", "max_iterations") for r in stopping):
        # default: 20% of the total possible simulations (baseline + countermeasure)
        stopping = stopping + (StoppingRule("budget", 0.2 * 2 * grid.n_cells),)
    return ExperimentConfig(method=args.method, target=args.target, assr=args.assr,
                            stratified=args.stratified, batch_size=args.batch_size,
                            stopping=stopping, seed=args.seed,
                            repetitions=getattr(args, "reps", 1))


def cmd_run(args) -> int:
    grid, sim = _load_env(args)
    cfg = _experiment_config(args, grid)
    trace = run_experiment(cfg, grid, ground_truth=None, sim_params=sim)
    trace_to_csv(trace, args.out)
    print(f"{cfg.label}: {trace.iterations[-1]} iterations, "
          f"{trace.sims_used[-1]} sims, stopped: {trace.stop_reason}")
    return 0


def cmd_evaluate(args) -> int:
    grid, sim = _load_env(args)
    gt = build_ground_truth(grid, sim)
    cfg = _experiment_config(args, grid)
    budget = args.budget if args.budget is not None else 0.2 * 2 * grid.n_cells
    checkpoints = default_checkpoints(int(budget))
    result = evaluate_rmse([cfg], grid, gt, n_reps=args.reps, checkpoints=checkpoints,
                           sim_params=sim, n_workers=args.workers)
    to_rmse_csv(result, args.out)
    print(f"wrote RMSE curve ({args.reps} reps) to {args.out}")
    return 0


def cmd_compare(args) -> int:
    grid, sim = _load_env(args)
    gt = build_ground_truth(grid, sim)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suites = list(SUITES) if args.suite == "all" else [args.suite]
    targets = tuple(args.targets) if args.targets else TARGETS
    for suite in suites:
        configs = suite_configs(suite, seed=args.seed, budget=args.budget,
                                batch_size=args.batch_size, targets=targets)
        checkpoints = default_checkpoints(int(args.budget))
        result = evaluate_rmse(configs, grid, gt, n_reps=args.reps,
                               checkpoints=checkpoints, sim_params=sim,
                               n_workers=args.workers)
        path = out_dir / f"{suite}.csv"
        to_rmse_csv(result, path)
        print(f"suite {suite}: {len(configs)} arms x {args.reps} reps -> {path}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rmse_col = f"rmse_{args.target}"
    curves: dict[str, list[tuple[int, float]]] = {}
    with open(args.rmse) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or rmse_col not in reader.fieldnames:
            raise ConfigError(f"{args.rmse} has no column {rmse_col}")
        for row in reader:
            curves.setdefault(row["label"], []).append(
                (int(row["sims"]), float(row[rmse_col])))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, pts in curves.items():
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel("simulator invocations")
    ax.set_ylabel(f"RMSE ({args.target.replace('_', ' ')})")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crashsampler",
                     description="Adaptive sampling for crash-scenario generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ground-truth", help="build and persist the exhaustive outcome table")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-json", default=None, help="also save the generated grid as JSON")
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("run", help="run one experiment, write its trace CSV")
    _add_experiment_flags(p, require_seed=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="repeat an experiment, write the RMSE CSV")
    _add_experiment_flags(p, require_seed=True)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run a named comparison suite")
    p.add_argument("--suite", required=True, choices=SUITES + ("all",))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--budget", type=float, default=6000)
    p.add_argument("--batch-size", type=int, default=44)
    p.add_argument("--targets", nargs="*", choices=TARGETS, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="RMSE CSV to a static SVG line chart")
    p.add_argument("--rmse", required=True)
    p.add_argument("--target", default="speed_reduction", choices=TARGETS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SimulationFault, MonotonicityViolation, OSError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
