"""Command line entry point: ``sdgt run|sweep|cooptimize|plot|check``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .checks import SUITES, check
from .cooptimizer import CoOptProblem, learning_term, pareto_frontier, solve, solve_relaxed
from .harness import (
    ENV_OUTPUT_DIR,
    ENV_THREADS,
    ExperimentSpec,
    SpecError,
    _atomic_write,
    default_workers,
    emit_plot,
    plot_from_spec,
    run_experiment,
)
from .presets import PRESETS, fig5_specs


def _load_doc(path: str) -> dict:
    try:
        return yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise SpecError(f"no such file: {path}") from None


def _spec(arg: str) -> ExperimentSpec:
    if arg in PRESETS:
        return ExperimentSpec.from_dict(PRESETS[arg])
    return ExperimentSpec.from_dict(_load_doc(arg))


def _run_fig5(output_dir) -> None:
    from .algorithms import RunConfig, run
    from .problems import OMEGA_KAPPA_80, generate_least_squares
    from .diagnostics import records_to_csv
    from .topology import build_topology

    base = Path(output_dir or os.environ.get(ENV_OUTPUT_DIR) or "results") / "fig5-like"
    problem = generate_least_squares(omega=OMEGA_KAPPA_80, rng_seed=0)
    topology = build_topology(30, 6, 0)
    for name, entry in fig5_specs().items():
        files = []
        for label in ("coopt", "naive"):
            res = run(RunConfig(**entry[label]), topology, problem)
            path = base / f"{name}_{label}.csv"
            _atomic_write(path, records_to_csv(res.records))
            files.append(path)
        sol = entry["solution"]
        svg = emit_plot(files, base / f"{name}.svg", x="comm_cost_cum",
                        labels=[f"co-optimized h={sol.h} K={sol.K}", "naive full sampling K=1"])
        print(f"{name}: wrote {files[0].name}, {files[1].name}, {svg.name}")


def cmd_run(args, workers=1) -> int:
    if args.spec == "fig5-like":
        _run_fig5(args.output_dir)
        return 0
    manifest = run_experiment(_spec(args.spec), output_dir=args.output_dir, workers=workers)
    doc = json.loads(manifest.read_text())
    diverged = [r["file"] for r in doc["runs"] if r["diverged"]]
    print(f"{len(doc['runs'])} runs -> {manifest.parent}")
    for name in diverged:
        print(f"diverged: {name}")
    return 0


def cmd_sweep(args) -> int:
    return cmd_run(args, workers=args.workers or default_workers())


def _solution_doc(sol) -> dict:
    return {"h": sol.h, "beta": sol.beta, "p": sol.p, "K": sol.K,
            "objective": sol.objective_value, "round_cost": sol.round_cost}


def cmd_cooptimize(args) -> int:
    if args.problem.startswith("fig5-like"):
        from .presets import fig5_problem
        delta = float(args.problem.split(":", 1)[1]) if ":" in args.problem else 1e-3
        problem = fig5_problem(delta)
    else:
        problem = CoOptProblem.from_dict(_load_doc(args.problem))
    sol = solve(problem)
    doc = {"solution": _solution_doc(sol)}
    if args.relaxed:
        rel = solve_relaxed(problem)
        doc["relaxed"] = {"p": rel.p, "beta": rel.beta, "K": rel.K, "objective": rel.objective_value,
                          "constraint_active": rel.constraint_active,
                          "rounded": _solution_doc(rel.rounded)}
    print(json.dumps(doc, indent=1))
    if args.pareto:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round_cost", "learning_term", "objective", "K", "p", "h"])
        for point in pareto_frontier(problem):
            writer.writerow([repr(point.round_cost), repr(learning_term(point, problem)),
                             repr(point.objective_value), point.K, repr(point.p),
                             " ".join(map(str, point.h))])
        _atomic_write(Path(args.pareto), buf.getvalue())
        print(f"pareto frontier -> {args.pareto}")
    return 0


def cmd_plot(args) -> int:
    path = Path(args.plot_spec)
    doc = _load_doc(args.plot_spec)
    out = plot_from_spec(doc, base_dir=path.parent)
    print(f"wrote {out}")
    return 0


def cmd_check(args) -> int:
    results = check(args.suite)
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdgt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment spec (or preset) sequentially")
    p.add_argument("spec", help=f"spec file or preset: {', '.join([*PRESETS, 'fig5-like'])}")
    p.add_argument("--output-dir", help=f"overrides ${ENV_OUTPUT_DIR} and the spec")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run an experiment spec with process-level parallelism")
    p.add_argument("spec")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int, help=f"process count (default ${ENV_THREADS} or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cooptimize", help="pick sample counts and D2D rounds")
    p.add_argument("problem", help="problem file (m, E, E_d2d or delta, lambdas, K_max) "
                                   "or fig5-like[:delta]")
    p.add_argument("--pareto", help="write the cost/learning Pareto frontier to this CSV")
    p.add_argument("--relaxed", action="store_true", help="also report the continuous relaxation")
    p.set_defaults(func=cmd_cooptimize)

    p = sub.add_parser("plot", help="render an SVG from a plot spec")
    p.add_argument("plot_spec")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("check", help="run a self-check suite")
    p.add_argument("suite", choices=SUITES)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
