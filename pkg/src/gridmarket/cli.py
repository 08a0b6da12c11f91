"""Command-line entry point: validate configs, run solves and sweeps, emit CSV."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

from .model import report_distance, validate_instance
from .scenarios import (Scenario, builtin_scenarios, der_gain, emit_csv,
                        load_config, load_gain, run_scenario)
from .solver import SolverOptions, default_lambda, solve_scalarized
from .transform import Weights

__all__ = ["main", "entry"]

ENV_SEED = "GRIDMARKET_SEED"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we report and exit(1)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config JSON")
    common.add_argument("--out", help="output file (written atomically)")
    common.add_argument("--alpha", type=float, help="override the discount cap")
    common.add_argument("--lambda", dest="lam",
                        help='"default" or comma-separated weights on the simplex')
    common.add_argument("--tol", type=float, help="gradient tolerance")
    common.add_argument("--max-iter", type=int, help="iteration cap")
    common.add_argument("--seed", type=int,
                        help=f"RNG seed (falls back to ${ENV_SEED}, then 0)")
    common.add_argument("--solver", choices=["central", "admm"],
                        help="solver selection override")
    common.add_argument("--rho", type=float, default=1.0,
                        help="consensus penalty parameter")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel sweep evaluations")
    common.add_argument("--strict", action="store_true",
                        help="exit 2 when the solver did not converge")

    parser = _Parser(prog="gridmarket",
                     description="peer-to-peer energy market optimization")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common],
                   help="check a config against the model invariants")
    sub.add_parser("solve", parents=[common],
                   help="single solve at one discount cap")
    sub.add_parser("sweep", parents=[common],
                   help="sweep the config's discount-cap grid, emit CSV")
    p_scen = sub.add_parser("scenario", parents=[common],
                            help="run a bundled or configured scenario")
    p_scen.add_argument("--name", help="bundled scenario name "
                        "(tight, unbalanced_tight, loose)")
    sub.add_parser("admm", parents=[common],
                   help="consensus solve; --out writes the iteration trace")
    return parser


def main(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _dispatch(args)
    except (_UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


def _dispatch(args) -> int:
    if args.command == "validate":
        return _cmd_validate(args)
    if args.command == "solve":
        return _cmd_solve(args, surrogate=False)
    if args.command == "admm":
        return _cmd_solve(args, surrogate=True)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "scenario":
        return _cmd_scenario(args)
    raise _UsageError(f"unknown command {args.command!r}")


def _load_scenario(args) -> Scenario:
    if args.config is None:
        raise _UsageError("--config is required")
    return load_config(args.config)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise _UsageError(f"${ENV_SEED} must be an integer, got {env!r}") from exc
    return 0


def _options(args) -> SolverOptions:
    opts = SolverOptions(rng_seed=_seed(args))
    if args.tol is not None:
        opts = replace(opts, tol_grad=args.tol)
    if args.max_iter is not None:
        opts = replace(opts, max_iter=args.max_iter)
    return opts


def _resolve_lambda(args, scenario: Scenario) -> Weights:
    G, L = scenario.instance.num_ders, scenario.instance.num_loads
    if args.lam is None:
        return scenario.weights()
    if args.lam == "default":
        return default_lambda(G, L)
    try:
        values = [float(tok) for tok in args.lam.split(",")]
    except ValueError as exc:
        raise _UsageError(f"--lambda: not a number list: {args.lam!r}") from exc
    from .scenarios import _weights_from_list
    return _weights_from_list(values, G, L)


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gridmarket-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cmd_validate(args) -> int:
    scenario = _load_scenario(args)
    problems = scenario.validate()
    for p in problems:
        print(p)
    if problems:
        return 1
    print(f"ok: scenario {scenario.name!r} is valid")
    return 0


def _cmd_solve(args, surrogate: bool) -> int:
    scenario = _load_scenario(args)
    inst = scenario.instance
    if args.alpha is not None:
        inst = replace(inst, discount_cap=args.alpha)
    problems = validate_instance(inst)
    if problems:
        for p in problems:
            print(p)
        return 1
    lam = _resolve_lambda(args, scenario)
    opts = _options(args)

    trace = None
    use_admm = surrogate or args.solver == "admm" or \
        (args.solver is None and scenario.solver == "admm")
    if use_admm:
        from .admm import RegionPartition, admm_solve, partition_by_branch
        if inst.der_regions is not None and inst.load_regions is not None:
            partition = partition_by_branch(inst)
        else:
            partition = RegionPartition(1, (tuple(range(inst.num_ders)),),
                                        (tuple(range(inst.num_loads)),))
        sol, trace = admm_solve(inst, lam, partition, rho=args.rho, opts=opts)
    else:
        sol = solve_scalarized(inst, lam, opts)

    summary = {
        "objective": sol.objective,
        "objective_kind": sol.objective_kind,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual,
        "der_gain_pct": der_gain(inst, sol),
        "load_gain_pct": load_gain(inst, sol),
        "distance": report_distance(inst, sol.state),
        "notes": list(sol.notes),
    }
    for key, value in sorted(summary.items()):
        print(f"{key}: {value}")

    if args.out:
        if trace is not None and args.command == "admm":
            from .admm import write_trace_csv
            fd, tmp = tempfile.mkstemp(
                dir=os.path.dirname(os.path.abspath(args.out)),
                prefix=".gridmarket-")
            os.close(fd)
            write_trace_csv(trace, tmp)
            os.replace(tmp, args.out)
        else:
            payload = dict(summary)
            payload["state"] = {
                "prices": sol.state.prices.tolist(),
                "alloc": sol.state.alloc.tolist(),
                "dem": sol.state.dem.tolist(),
                "disc": sol.state.disc.tolist(),
            }
            _atomic_write(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if args.strict and not sol.converged:
        return 2
    return 0


def _run_and_emit(scenario: Scenario, args) -> int:
    opts = _options(args)
    scenario = replace(scenario, lam=_resolve_lambda(args, scenario))
    if args.solver is not None:
        scenario = replace(scenario, solver=args.solver)
    records = run_scenario(scenario, opts, jobs=args.jobs)
    text = emit_csv(records)
    if args.out:
        _atomic_write(args.out, text)
        print(f"wrote {len(records)} records to {args.out}")
    else:
        print(text, end="")
    if args.strict and not all(r.converged for r in records):
        return 2
    return 0


def _cmd_sweep(args) -> int:
    scenario = _load_scenario(args)
    problems = scenario.validate()
    if problems:
        for p in problems:
            print(p)
        return 1
    return _run_and_emit(scenario, args)


def _cmd_scenario(args) -> int:
    if args.name is not None:
        matches = [s for s in builtin_scenarios() if s.name == args.name]
        if not matches:
            names = ", ".join(s.name for s in builtin_scenarios())
            raise _UsageError(f"unknown scenario {args.name!r}; available: {names}")
        scenario = matches[0]
    else:
        scenario = _load_scenario(args)
        problems = scenario.validate()
        if problems:
            for p in problems:
                print(p)
            return 1
    return _run_and_emit(scenario, args)


if __name__ == "__main__":
    entry()
