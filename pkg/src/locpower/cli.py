"""Command-line interface.

Subcommands:
  solve       scenario JSON -> allocation JSON + objective
  experiment  Monte-Carlo experiment -> CSV
  oracle      cross-check the solver against the exhaustive grid oracle
  roots       admissible-shrinkage table for fading spreads

Exit codes: 0 success, 1 infeasible/degenerate instance, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness, robust, solver
from .netmodel import scenario_from_json


def _read_scenario(path):
    with open(path) as fh:
        return scenario_from_json(fh.read())


def _cmd_solve(args):
    scenario = _read_scenario(args.scenario)
    solvers = {
        "speb": solver.solve_speb,
        "mdpeb": solver.solve_mdpeb,
        "robust-speb": solver.solve_robust_speb,
        "robust-mdpeb": solver.solve_robust_mdpeb,
    }
    if args.objective.startswith("minmax-"):
        report = solver.solve_minmax(
            scenario, metric=args.objective[len("minmax-"):], tol=args.tol
        )
    else:
        report = solvers[args.objective](scenario, tol=args.tol)
    doc = {
        "status": report.status,
        "objective": report.objective,
        "kkt_residual": report.kkt_residual,
        "allocation": None
        if report.allocation is None
        else report.allocation.x.tolist(),
    }
    out = json.dumps(doc, indent=2)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(out + "\n")
    else:
        print(out)
    return 0 if report.status == "optimal" else 1


def _cmd_experiment(args):
    config = harness.ExperimentConfig(
        experiment=args.experiment,
        trials=args.trials,
        schemes=tuple(args.schemes.split(",")) if args.schemes else (),
        sweep=_parse_sweep(args),
        eps=args.eps,
        seed=args.seed,
        n_anchors=args.anchors_fixed,
        n_agents=args.agents_fixed,
    )
    rows = harness.run_experiment(config)
    text = harness.rows_to_csv(rows)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _parse_sweep(args):
    if args.experiment == "fig7-robust-epsilon":
        if args.eps_sweep:
            return tuple(float(v) for v in args.eps_sweep.split(","))
        return ()
    if args.experiment in ("fig3-anchors-sweep", "fig6-robust-anchors") and args.anchors:
        return tuple(int(v) for v in args.anchors.split(","))
    if args.experiment == "fig5-agents-sweep" and args.agents:
        return tuple(int(v) for v in args.agents.split(","))
    return ()


def _cmd_oracle(args):
    scenario = _read_scenario(args.scenario)
    solvers = {
        "speb": solver.solve_speb,
        "mdpeb": solver.solve_mdpeb,
        "robust-speb": solver.solve_robust_speb,
        "robust-mdpeb": solver.solve_robust_mdpeb,
    }
    report = solvers[args.objective](scenario, tol=args.tol)
    if report.status != "optimal":
        print(f"solver status: {report.status}")
        return 1
    oracle = solver.oracle_grid(scenario, args.objective, args.step)
    gap = (oracle.objective - report.objective) / max(abs(oracle.objective), 1e-300)
    print(f"solver objective: {report.objective!r}")
    print(f"oracle objective: {oracle.objective!r} (step {args.step})")
    print(f"relative gap (oracle - solver): {gap:.3e}")
    return 0


def _cmd_roots(args):
    for ratio in (float(r) for r in args.ratios.split(",")):
        print(f"{robust.delta_max(ratio):.3f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="locpower",
        description="Optimal and robust power allocation for localization networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument(
        "--objective",
        default="speb",
        choices=["speb", "mdpeb", "robust-speb", "robust-mdpeb",
                 "minmax-speb", "minmax-mdpeb"],
    )
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--output", help="write the result JSON here")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("experiment", help="run a Monte-Carlo experiment")
    p.add_argument("--experiment", required=True, choices=list(harness.EXPERIMENTS))
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schemes", help="comma-separated scheme list")
    p.add_argument("--anchors", help="anchor-count sweep, comma-separated")
    p.add_argument("--agents", help="agent-count sweep, comma-separated")
    p.add_argument("--eps-sweep", help="epsilon sweep, comma-separated")
    p.add_argument("--eps", type=float, default=0.2, help="normalized uncertainty size")
    p.add_argument("--anchors-fixed", type=int, default=10,
                   help="anchor count for experiments that fix it")
    p.add_argument("--agents-fixed", type=int, default=1)
    p.add_argument("--output", help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("oracle", help="cross-check solver vs grid oracle")
    p.add_argument("--scenario", required=True)
    p.add_argument(
        "--objective",
        default="speb",
        choices=["speb", "mdpeb", "robust-speb", "robust-mdpeb"],
    )
    p.add_argument("--step", type=float, default=2e-3)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("roots", help="shrinkage bounds for fading spreads")
    p.add_argument("--ratios", default="1,5", help="comma-separated spread ratios")
    p.set_defaults(func=_cmd_roots)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
