"""Command-line front end.

Commands: ``project``, ``solve``, ``run``, ``validate``. Exit codes:

* 0: success, all checks passed
* 2: invalid config or arguments
* 3: solver failure or infeasible initial state
* 4: a verdict failed (degraded steps, moment decay, or MC discrepancy)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .arrayio import write_array
from .config import ConfigError, ExperimentConfig, load_config, parse_config, preset, schema
from .galerkin import lift_system
from .rhc_engine import PlantHandle, SolverError, check_moment_decay, rhc_step, run_closed_loop
from .solvers.variable_gain import unpack
from .transcription import FULL, VARIABLE_GAIN, InfeasibleInitialError, build_problem, horizon_qp
from .validation import chaos_trajectory, compare_moments, sample_delta, simulate_ensemble

log = logging.getLogger("gpcrhc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERDICT = 4


def _config(args) -> ExperimentConfig:
    if (args.config is None) == (args.example is None):
        raise ConfigError("give exactly one of --config or --example")
    cfg = load_config(args.config) if args.config else preset(args.example)
    data = cfg.model_dump()
    if args.seed is not None:
        data["run"]["seed"] = args.seed
    if args.threads is not None:
        data["run"]["threads"] = args.threads
    if args.order is not None:
        data["basis"]["order"] = args.order
    if args.horizon is not None:
        data["cost"]["N"] = args.horizon
    if args.mode is not None:
        data["mode"] = args.mode
    if args.out is not None:
        data["output"]["dir"] = args.out
    return parse_config(data)


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n")


def _problem(cfg: ExperimentConfig):
    usys = cfg.uncertain_system()
    chaos = lift_system(usys, cfg.basis_set())
    X0 = cfg.initial_state(chaos.size)
    problem = build_problem(chaos, cfg.cost_spec(), cfg.constraint_specs(), mode=cfg.mode, X0=X0)
    return usys, chaos, problem


def cmd_project(cfg: ExperimentConfig) -> int:
    chaos = lift_system(cfg.uncertain_system(), cfg.basis_set())
    out = _outdir(cfg)
    T = chaos.tensors
    write_array(out / "A_bold.txt", chaos.Abold)
    write_array(out / "B_bold.txt", chaos.Bbold)
    write_array(out / "W.txt", T.W)
    write_array(out / "E.txt", T.E)
    meta = {
        "p": chaos.size - 1,
        "order": chaos.basis.r,
        "n": chaos.n,
        "m": chaos.m,
        "families": [f.kind for f in chaos.basis.families],
        "multi_indices": [list(t) for t in chaos.basis.terms],
        "files": ["A_bold.txt", "B_bold.txt", "W.txt", "E.txt"],
    }
    _write_json(out / "projection.json", meta)
    return EXIT_OK


def cmd_solve(cfg: ExperimentConfig) -> int:
    _, chaos, problem = _problem(cfg)
    ctl, rep = rhc_step(problem, problem.X0, cfg.settings())
    data = {
        "mode": problem.mode,
        "status": rep.status,
        "objective": rep.objective,
        "iterations": rep.iterations,
        "residuals": rep.residuals,
        "first_control": ctl.U.tolist(),
    }
    if problem.mode == VARIABLE_GAIN:
        ubar, gains = unpack(problem, rep.x)
        data["ubar"] = ubar.tolist()
        data["gains"] = gains.tolist()
    else:
        _, layout = horizon_qp(problem)
        data["states"] = layout.states(rep.x, problem.X0).tolist()
        key = "controls" if problem.mode == FULL else "ubar"
        data[key] = layout.inputs(rep.x).tolist()
    _write_json(_outdir(cfg) / "solution.json", data)
    return EXIT_OK if not ctl.degraded else EXIT_VERDICT


def cmd_run(cfg: ExperimentConfig) -> int:
    usys, chaos, problem = _problem(cfg)
    if cfg.run.truth_delta is not None:
        plant = PlantHandle.sampled(usys, cfg.run.truth_delta, cfg.run.x0)
    else:
        plant = PlantHandle.surrogate(problem.X0)
    trace = run_closed_loop(plant, problem, cfg.run.steps, cfg.settings())
    out = _outdir(cfg)
    trace.to_csv(out / "trace.csv")
    decay = check_moment_decay(trace, tolerance=cfg.run.decay_tolerance) if trace.error is None else None
    trace.write_summary(out / "summary.json", decay)
    if trace.error is not None:
        print(f"error: {trace.error}", file=sys.stderr)
        return EXIT_SOLVER
    if trace.degraded_steps or not decay.passed:
        return EXIT_VERDICT
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig) -> int:
    usys = cfg.uncertain_system()
    basis = cfg.basis_set()
    chaos = lift_system(usys, basis)
    steps = cfg.run.validate_steps
    X = chaos_trajectory(chaos, cfg.initial_state(chaos.size), None, steps)
    samples = sample_delta(usys.distributions, cfg.run.samples, cfg.run.seed)
    ens = simulate_ensemble(usys, samples, None, steps, cfg.run.x0, threads=cfg.run.threads)
    report = compare_moments(ens, X, basis, seed=cfg.run.seed)
    passed = report.passed(3.0)
    dm, dv = report.max_discrepancy()
    report.write_json(
        _outdir(cfg) / "moments.json",
        {"threshold": 3.0, "max_disc_mean": dm, "max_disc_var": dv, "passed": passed},
    )
    return EXIT_OK if passed else EXIT_VERDICT


HELP = {
    "project": "write the lifted system and basis tensors",
    "solve": "solve one horizon problem from the initial state",
    "run": "run the closed loop and check moment decay",
    "validate": "compare open-loop gPC moments with Monte Carlo",
}
COMMANDS = {"project": cmd_project, "solve": cmd_solve, "run": cmd_run, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpcrhc", description="Receding-horizon control of uncertain linear systems via polynomial chaos.")
    p.add_argument("--schema", action="store_true", help="print the config JSON schema and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        c = sub.add_parser(name, help=HELP[name])
        c.add_argument("--config", type=Path, help="experiment TOML file")
        c.add_argument("--example", choices=["paper", "deterministic-smoke"], help="built-in experiment")
        c.add_argument("--out", help="output directory (default from config)")
        c.add_argument("--seed", type=int, help="sampling seed")
        c.add_argument("--threads", type=int, help="worker threads for ensembles")
        c.add_argument("--order", type=int, help="total polynomial order r")
        c.add_argument("--horizon", type=int, help="prediction horizon N")
        c.add_argument("--mode", choices=["full", "fixed-gain", "variable-gain"], help="control parametrization")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.schema:
        print(json.dumps(schema(), indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _config(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except InfeasibleInitialError as err:
        print(f"error: {err.code}: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except ArithmeticError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
