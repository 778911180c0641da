"""Command-line harness: solve scenarios, benchmark solvers, replay policies.

Commands
    solve                 run one solver, write policy/value/moment CSVs
    benchmark             run solvers, paired rollouts, timing and
                          space-reduction CSVs
    rollout               execute a stored policy, write trajectories
    estimate-local-times  precompute the kinematic hop-time table
    export-field          sample the configured field to the gridded CSV format

All outputs are plain CSVs stamped with the resolved config hash. Given
the same config and seed, every command rewrites byte-identical files,
except ``timing.csv`` whose entries are wall-clock measurements.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .core import Policy, write_policy_csv
from .disturbance import write_gridded_field
from .moments import compute_ppt_moments
from .scenario import ConfigError, Scenario, build_scenario, load_config
from .simulate import benchmark as run_benchmark
from .simulate import rollout as run_rollout
from .solvers import (
    SolveResult,
    solve_expected_ppt_vi,
    solve_full_st_vi,
    solve_non_iterative,
    solve_reachable_vi,
)
from .transitions import estimate_local_times_mc, save_local_times_csv

SOLVERS = {
    "full_st": solve_full_st_vi,
    "alg1": solve_expected_ppt_vi,
    "alg2": solve_reachable_vi,
    "non_iter": solve_non_iterative,
}

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_CONFIG = 2


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list], config_hash: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _prepare(args) -> tuple[Scenario, Path, str]:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.values["run"]["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.values["run"]["workers"] = args.workers
        cfg.solver.workers = args.workers
    if getattr(args, "out", None) is not None:
        cfg.values["run"]["out_dir"] = args.out
    out_dir = Path(cfg.values["run"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario(cfg)
    chash = cfg.config_hash()
    (out_dir / "resolved.cfg").write_text(cfg.resolved_text())
    return scenario, out_dir, chash


def _solve_one(scenario: Scenario, name: str) -> SolveResult:
    return SOLVERS[name](scenario.model, scenario.config.solver)


def cmd_solve(args) -> int:
    scenario, out_dir, chash = _prepare(args)
    model = scenario.model
    result = _solve_one(scenario, args.solver)

    K = model.time_grid.slot_count
    write_policy_csv(out_dir / "policy.csv", result.policy, slot_count=K, comment=f"config_hash={chash}")
    result.values.to_csv(out_dir / "values.csv", comment=f"config_hash={chash}")
    moments = result.extras.get("moments")
    if moments is None:
        moments = compute_ppt_moments(
            model,
            result.policy,
            alpha=scenario.config.solver.alpha,
            workers=scenario.config.solver.workers,
        )
    moments.to_csv(out_dir / "moments.csv", comment=f"config_hash={chash}")
    rs = result.extras.get("reachable_space")
    if rs is not None:
        rs.to_csv(out_dir / "reachable.csv", comment=f"config_hash={chash}")
    _log(out_dir, f"solve solver={args.solver} converged={result.converged} iterations={result.iterations}")
    return EXIT_OK


def _moment_phase_seconds(scenario: Scenario, policy: Policy, workers: int) -> float:
    t0 = time.perf_counter()
    compute_ppt_moments(
        scenario.model, policy, alpha=scenario.config.solver.alpha, workers=workers
    )
    return time.perf_counter() - t0


def cmd_benchmark(args) -> int:
    scenario, out_dir, chash = _prepare(args)
    model = scenario.model
    cfg = scenario.config
    names = list(SOLVERS) if args.solver == "all" else [args.solver]

    results: dict[str, SolveResult] = {}
    timing_rows: list[list] = []
    for name in names:
        result = _solve_one(scenario, name)
        results[name] = result
        for i, dt in enumerate(result.timings.get("per_iteration", [])):
            timing_rows.append([name, i, "iteration", dt, cfg.solver.workers])
        for phase, series in result.timings.get("phases", {}).items():
            for i, dt in enumerate(series):
                timing_rows.append([name, i, phase, dt, cfg.solver.workers])

    if "alg2" in results:
        final_policy = results["alg2"].policy
        multi = cfg.values["run"]["workers"] if cfg.values["run"]["workers"] > 1 else 4
        timing_rows.append(
            ["alg2", -1, "moment_phase_workers_1", _moment_phase_seconds(scenario, final_policy, 1), 1]
        )
        timing_rows.append(
            [
                "alg2",
                -1,
                f"moment_phase_workers_{multi}",
                _moment_phase_seconds(scenario, final_policy, multi),
                multi,
            ]
        )

    policies = {name: results[name].policy for name in names}
    max_steps = cfg.values["run"]["max_steps"] or None
    stats = run_benchmark(
        model,
        policies,
        n_rollouts=cfg.values["run"]["n_rollouts"],
        seed=cfg.values["run"]["seed"],
        s0=model.start,
        max_steps=max_steps,
    )
    stat_rows = [
        [
            s.name,
            s.n_rollouts,
            s.n_success,
            s.success_rate,
            s.transitions_mean,
            s.transitions_sd,
            s.length_mean,
            s.length_sd,
            s.return_mean,
            s.elapsed_mean,
        ]
        for s in stats.values()
    ]
    _write_csv(
        out_dir / "stats.csv",
        [
            "solver",
            "n_rollouts",
            "n_success",
            "success_rate",
            "transitions_mean",
            "transitions_sd",
            "length_mean",
            "length_sd",
            "return_mean",
            "elapsed_mean",
        ],
        stat_rows,
        chash,
    )
    _write_csv(
        out_dir / "timing.csv",
        ["solver", "iteration", "phase", "seconds", "workers"],
        timing_rows,
        chash,
    )
    reduced_rows = []
    if "alg2" in results:
        extras = results["alg2"].extras
        full_size = model.n_states * model.time_grid.slot_count
        for i, (size, cum) in enumerate(zip(extras["reachable_sizes"], extras["cumulative_visited"])):
            reduced_rows.append([i, size, cum, full_size])
    _write_csv(
        out_dir / "reduced.csv",
        ["iteration", "reachable_size", "cumulative_visited", "full_size"],
        reduced_rows,
        chash,
    )
    _log(out_dir, f"benchmark solvers={names}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    scenario, out_dir, chash = _prepare(args)
    model = scenario.model
    policy_path = Path(args.policy)
    if not policy_path.exists():
        raise ConfigError(f"policy file not found: {policy_path}")
    policy = Policy.from_csv(policy_path)
    rows = []
    max_steps = scenario.config.values["run"]["max_steps"] or None
    for r in range(args.n):
        ro = run_rollout(model, policy, model.start, seed=[scenario.config.values["run"]["seed"], r], max_steps=max_steps)
        success = int(ro.outcome == "goal")
        for step_i, (s, k, a, _rew) in enumerate(ro.steps):
            x, y = model.grid.position(s)
            rows.append([r, step_i, x, y, model.time_grid.time_of(k), a, ro.outcome, success])
    _write_csv(
        out_dir / "trajectories.csv",
        ["rollout", "step", "x", "y", "t", "action", "outcome", "success"],
        rows,
        chash,
    )
    _log(out_dir, f"rollout n={args.n} policy={policy_path}")
    return EXIT_OK


def cmd_estimate_local_times(args) -> int:
    scenario, out_dir, chash = _prepare(args)
    cfg = scenario.config
    lt = cfg.values["local_time"]
    table = estimate_local_times_mc(
        scenario.field,
        scenario.vehicle,
        scenario.grid,
        scenario.time_grid,
        trials=lt["trials"],
        seed=cfg.values["run"]["seed"],
        heading_sigma2=lt["heading_sigma2"],
    )
    save_local_times_csv(out_dir / "local_times.csv", table, comment=f"ltt_hash={cfg.local_time_hash()}")
    _log(out_dir, f"estimate-local-times clipped_low={table.clipped_low} clipped_high={table.clipped_high}")
    return EXIT_OK


def cmd_export_field(args) -> int:
    scenario, out_dir, chash = _prepare(args)
    grid, tg = scenario.grid, scenario.time_grid
    xs = np.arange(grid.cols) * grid.cell_size
    ys = np.arange(grid.rows) * grid.cell_size
    vx = np.zeros((grid.cols, grid.rows, tg.slot_count))
    vy = np.zeros_like(vx)
    for k in range(tg.slot_count):
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        fx, fy = scenario.field.velocity_grid(gx.ravel(), gy.ravel(), tg.time_of(k))
        vx[:, :, k] = fx.reshape(grid.cols, grid.rows)
        vy[:, :, k] = fy.reshape(grid.cols, grid.rows)
    write_gridded_field(
        out_dir / "field.csv",
        vx,
        vy,
        origin=(0.0, 0.0, 0.0),
        spacing=(grid.cell_size, grid.cell_size, tg.dt if tg.slot_count > 1 else 1.0),
    )
    _log(out_dir, "export-field")
    return EXIT_OK


def _log(out_dir: Path, message: str) -> None:
    # timestamps live only here, never in the data CSVs
    with open(out_dir / "run.log", "a") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvmdp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver_flag=True):
        p.add_argument("--config", required=True, help="scenario config file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--workers", type=int, default=None, help="override run.workers")
        p.add_argument("--out", default=None, help="override run.out_dir")
        if solver_flag:
            p.add_argument("--solver", choices=list(SOLVERS), default="alg2")

    p = sub.add_parser("solve", help="solve one scenario and write policy/value/moment CSVs")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("benchmark", help="run solvers and paired rollouts")
    common(p, solver_flag=False)
    p.add_argument("--solver", choices=list(SOLVERS) + ["all"], default="all")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("rollout", help="execute a stored policy")
    common(p, solver_flag=False)
    p.add_argument("--policy", required=True, help="policy CSV from 'solve'")
    p.add_argument("-n", type=int, default=1, help="number of rollouts")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("estimate-local-times", help="precompute kinematic hop times")
    common(p, solver_flag=False)
    p.set_defaults(func=cmd_estimate_local_times)

    p = sub.add_parser("export-field", help="sample the field to gridded CSV")
    common(p, solver_flag=False)
    p.set_defaults(func=cmd_export_field)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # solver or runtime failure
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
