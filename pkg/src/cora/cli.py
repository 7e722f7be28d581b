"""Command-line interface: solve, certify, generate, sweep, and eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import io as cora_io
from .assembly import assemble_constraints, assemble_data_matrix, evaluate_lifted_cost
from .certify import certify_solution
from .metrics import trajectory_metrics
from .problem import build_ordering, require_valid
from .rtr import RtrOptions
from .staircase import StaircaseOptions, cora_solve, state_from_solution
from .synthetic import GeneratorConfig, SweepConfig, generate_synthetic, run_sweep, write_sweep_csv

logger = logging.getLogger("cora.cli")

_PRECON_ALIASES = {
    "block-chol": "block-cholesky",
    "reg-chol": "regularized-cholesky",
    "block-cholesky": "block-cholesky",
    "regularized-cholesky": "regularized-cholesky",
    "jacobi": "jacobi",
    "block-jacobi": "block-jacobi",
    "none": "none",
}


def _configure_logging() -> None:
    level = os.environ.get("CORA_LOG", "warn").lower()
    levels = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    logging.basicConfig(
        level=levels.get(level, logging.WARNING),
        format="[%(name)s] %(levelname)s %(message)s",
    )


def _staircase_options(args) -> StaircaseOptions:
    rtr = RtrOptions(preconditioner=_PRECON_ALIASES[args.precon])
    options = StaircaseOptions(rtr=rtr, seed=args.seed)
    if args.p0 is not None:
        options = replace(options, initial_rank=args.p0)
    if args.pmax is not None:
        options = replace(options, max_rank=args.pmax)
    if args.beta is not None:
        options = replace(options, beta=args.beta)
    if args.mu is not None:
        options = replace(options, mu=args.mu)
    return options


def _cmd_solve(args) -> int:
    problem, _ = cora_io.parse_problem_file(args.file)
    require_valid(problem)
    options = _staircase_options(args)

    if args.init == "random":
        options = replace(options, initialization="random")
    elif args.init == "odometry":
        options = replace(options, initialization="odometry")
    elif args.init.startswith("file:"):
        sol_problem, sol_truth = cora_io.parse_problem_file(args.init[5:])
        if sol_truth is None:
            print("error: initialization file carries no vertex values", file=sys.stderr)
            return 2
        ordering = build_ordering(problem)
        from .assembly import RankDSolution

        X0 = state_from_solution(
            problem,
            ordering,
            RankDSolution(
                rotations=sol_truth.rotations,
                translations=sol_truth.translations,
                landmarks=sol_truth.landmarks,
            ),
        )
        options = replace(options, initialization="given", initial_state=X0)
    else:
        print(f"error: unknown init mode '{args.init}'", file=sys.stderr)
        return 2

    report = cora_solve(problem, options)
    payload = report.to_json_dict()
    print(json.dumps(payload, indent=2))
    if args.report:
        cora_io.write_report_json(args.report, report)
    if args.traj:
        cora_io.write_trajectory_tum(
            args.traj, report.solution.rotations, report.solution.translations
        )
    return 0 if report.status == "certified" else 1


def _cmd_certify(args) -> int:
    problem, _ = cora_io.parse_problem_file(args.file)
    require_valid(problem)
    sol_problem, sol_truth = cora_io.parse_problem_file(args.solution)
    if sol_truth is None:
        print("error: solution file carries no vertex values", file=sys.stderr)
        return 2
    ordering = build_ordering(problem)
    from .assembly import RankDSolution

    solution = RankDSolution(
        rotations=sol_truth.rotations,
        translations=sol_truth.translations,
        landmarks=sol_truth.landmarks,
    )
    X = state_from_solution(problem, ordering, solution)
    Q = assemble_data_matrix(problem, ordering)
    constraints = assemble_constraints(problem, ordering)
    result = certify_solution(Q.matrix, constraints, X, beta=args.beta)
    payload = {
        "certified": result.certified,
        "status": result.status,
        "beta": result.beta,
        "objective": evaluate_lifted_cost(Q, X),
        "multiplier_residual": result.multipliers.residual,
        "min_eigenvalue": result.min_eigenvalue,
    }
    print(json.dumps(payload, indent=2))
    return 0 if result.certified else 1


def _cmd_generate(args) -> int:
    cfg = GeneratorConfig(
        dimension=args.dim,
        num_robots=args.robots,
        num_poses=args.poses,
        num_landmarks=args.landmarks,
        num_ranges=args.ranges,
        num_loop_closures=args.loop_closures,
        kappa=args.noise_kappa,
        tau=args.noise_tau,
        sigma_range=args.noise_sigma,
        exact=args.exact,
    )
    problem, truth = generate_synthetic(cfg, seed=args.seed)
    cora_io.write_problem_file(problem, args.out, ground_truth=truth)
    print(
        f"wrote {args.out}: {problem.num_poses} poses, {problem.num_landmarks} landmarks, "
        f"{len(problem.rel_pose_measurements)} pose edges, {problem.num_ranges} ranges"
    )
    return 0


def _cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as handle:
        raw = json.load(handle)
    base_fields = {f.name for f in fields(GeneratorConfig)}
    base = GeneratorConfig(**{k: v for k, v in raw.get("base", {}).items() if k in base_fields})
    config = SweepConfig(
        parameter=raw["parameter"],
        values=tuple(raw["values"]),
        base=base,
        instances_per_value=raw.get("instances_per_value", 10),
        seed_base=raw.get("seed_base", 0),
        with_loop_closures=raw.get("with_loop_closures", True),
    )
    rows = run_sweep(config, workers=args.workers)
    write_sweep_csv(args.out, rows)
    solved = sum(1 for r in rows if r.status == "certified")
    print(f"wrote {args.out}: {len(rows)} instances, {solved} certified")
    return 0


def _cmd_eval(args) -> int:
    est_R, est_t = cora_io.parse_trajectory_tum(args.est)
    gt_R, gt_t = cora_io.parse_trajectory_tum(args.gt)
    metrics = trajectory_metrics(est_R, est_t, gt_R, gt_t, align=args.align)
    print(
        json.dumps(
            {
                "translational_rmse": metrics.translational_rmse,
                "rotational_rmse_deg": metrics.rotational_rmse_deg,
            },
            indent=2,
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cora",
        description="Certifiably correct range-aided SLAM solver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve a problem file and report bounds")
    solve.add_argument("file")
    solve.add_argument("--init", default="random", help="random | odometry | file:<path>")
    solve.add_argument("--p0", type=int, default=None)
    solve.add_argument("--pmax", type=int, default=None)
    solve.add_argument("--beta", type=float, default=None)
    solve.add_argument("--mu", type=float, default=None)
    solve.add_argument(
        "--precon", default="block-chol", choices=sorted(_PRECON_ALIASES)
    )
    solve.add_argument("--seed", type=int, default=0)
    solve.add_argument("--report", default=None)
    solve.add_argument("--traj", default=None)
    solve.set_defaults(func=_cmd_solve)

    certify = sub.add_parser("certify", help="certify a candidate solution")
    certify.add_argument("file")
    certify.add_argument("--solution", required=True)
    certify.add_argument("--beta", type=float, default=None)
    certify.set_defaults(func=_cmd_certify)

    generate = sub.add_parser("generate", help="generate a synthetic problem")
    generate.add_argument("--dim", type=int, default=2)
    generate.add_argument("--robots", type=int, default=4)
    generate.add_argument("--poses", type=int, default=200)
    generate.add_argument("--landmarks", type=int, default=2)
    generate.add_argument("--ranges", type=int, default=25)
    generate.add_argument("--loop-closures", type=int, default=10)
    generate.add_argument("--noise-kappa", type=float, default=50.0)
    generate.add_argument("--noise-tau", type=float, default=25.0)
    generate.add_argument("--noise-sigma", type=float, default=0.1)
    generate.add_argument("--exact", action="store_true")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", required=True)
    generate.set_defaults(func=_cmd_generate)

    sweep = sub.add_parser("sweep", help="run a parameter sweep from a JSON config")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--workers", type=int, default=1)
    sweep.set_defaults(func=_cmd_sweep)

    evaluate = sub.add_parser("eval", help="trajectory error between TUM files")
    evaluate.add_argument("--est", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--align", action="store_true")
    evaluate.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
