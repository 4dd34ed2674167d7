"""Command-line entry point: ``h2dual <command> [options]``."""

from __future__ import annotations

import argparse
import sys

from .errors import CapacityError, ConfigurationError, ConvergenceError
from .experiments import (
    SWEEP_AXES,
    TABLE_FORMATS,
    ExperimentPlan,
    emit_table,
    load_plan,
    manifest_path,
    run_benchmark_matrix,
    run_manifest,
    run_policy_matrix,
    run_sensitivity_sweep,
    rows_failed,
    sweep_cells,
    with_overrides,
    write_manifest,
)
from .dynamics import StateSpace
from .heuristics import (
    FOQParams,
    TBSParams,
    build_foq_plus,
    build_tbs_plus,
    foq_policy,
    params_from_json,
    params_to_json,
    tbs_policy,
    tune_foq,
    tune_tbs,
)
from .model import ScenarioPreset, load_scenario, preset_config
from .simulator import REPORT_HEADER, SimOptions, report_record, simulate
from .solver import SolverOptions, export_solution, relative_value_iteration


def _csv_list(kind):
    def parse(text):
        try:
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _shared(parser):
    g = parser.add_argument_group("scenario")
    g.add_argument("--country", type=_csv_list(str), help="Norway, Morocco or UAE (comma list for matrices)")
    g.add_argument("--storage", type=_csv_list(str), help="SC, CG or LH (comma list for matrices)")
    g.add_argument("--rho", type=_csv_list(float), help="local/import unit cost ratio (comma list for matrices)")
    g.add_argument("--varl-c", type=_csv_list(float), help="capacity variability level")
    g.add_argument("--varl-d", type=_csv_list(float), help="demand variability level")
    g.add_argument("--varl-y", type=_csv_list(float), help="yield-loss variability level")
    g.add_argument("--scenario", help="INI scenario file (single-instance commands)")
    g = parser.add_argument_group("run")
    g.add_argument("--periods", type=int, help="simulated periods including warm-up")
    g.add_argument("--warmup", type=int, help="periods discarded before averaging")
    g.add_argument("--seed", type=int, help="random stream seed")
    g.add_argument("--epsilon", type=float, help="span stopping threshold for value iteration")
    g.add_argument("--format", choices=TABLE_FORMATS, help="table format")
    g.add_argument("--out", help="output path (default: stdout)")
    g.add_argument("--plan", help="INI experiment plan; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h2dual", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="optimal policy by relative value iteration")
    _shared(p)
    p.add_argument("--export", help="write the per-state policy and bias table here")

    p = sub.add_parser("tune", help="tune FOQ and TBS parameters by simulation")
    _shared(p)

    p = sub.add_parser("simulate", help="simulate one policy and print its report")
    _shared(p)
    p.add_argument("--policy", default="Optimal", choices=("Optimal", "FOQ", "FOQ+", "TBS", "TBS+"))
    p.add_argument("--params", help="JSON parameter record from `tune` (skips tuning)")

    p = sub.add_parser("benchmark", help="optimal policy vs single-sourcing and misspecified models")
    _shared(p)

    p = sub.add_parser("policies", help="optimal policy vs FOQ, FOQ+, TBS and TBS+")
    _shared(p)

    p = sub.add_parser("sweep", help="optimal local supply share along one parameter axis")
    _shared(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    return parser


def _plan(args) -> ExperimentPlan:
    plan = load_plan(args.plan) if args.plan else ExperimentPlan()
    sim = plan.sim
    if args.periods is not None or args.warmup is not None or args.seed is not None:
        sim = SimOptions(
            periods=args.periods if args.periods is not None else sim.periods,
            warmup=args.warmup if args.warmup is not None else sim.warmup,
            seed=args.seed if args.seed is not None else sim.seed,
            batches=sim.batches,
        )
    solver = plan.solver
    if args.epsilon is not None:
        solver = SolverOptions(epsilon=args.epsilon, max_iterations=solver.max_iterations)
    return with_overrides(
        plan,
        countries=args.country,
        storages=args.storage,
        rhos=args.rho,
        varl_c=args.varl_c,
        varl_d=args.varl_d,
        varl_y=args.varl_y,
        sim=sim,
        solver=solver,
        out_path=args.out,
        format=args.format,
    )


def _single(values, default, name):
    if values is None:
        return default
    if len(values) != 1:
        raise ConfigurationError(f"--{name} takes a single value for this command")
    return values[0]


def _instance(args, plan: ExperimentPlan):
    if args.scenario:
        return load_scenario(args.scenario)
    preset = ScenarioPreset(
        _single(args.country, plan.countries[0], "country"),
        _single(args.storage, plan.storages[0], "storage"),
        _single(args.rho, 1.0, "rho"),
    )
    return preset_config(
        preset,
        _single(args.varl_c, plan.varl_c[0], "varl-c"),
        _single(args.varl_d, plan.varl_d[0], "varl-d"),
        _single(args.varl_y, plan.varl_y[0], "varl-y"),
    )


def _write(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_solve(args, plan):
    config = _instance(args, plan)
    result = relative_value_iteration(config, options=plan.solver)
    print(f"{config.label or 'scenario'}: gain={result.gain:.6f} span={result.span_residual:.3g} "
          f"iterations={result.iterations}")
    if args.export:
        with open(args.export, "w", encoding="utf-8", newline="") as fh:
            export_solution(result, config, fh)
    return 0


def _cmd_tune(args, plan):
    config = _instance(args, plan)
    sim = plan.sim
    foq = tune_foq(config, sim.periods, sim.seed, sim.warmup)
    tbs = tune_tbs(config, sim.periods, sim.seed, sim.warmup)
    _write(params_to_json(foq) + "\n" + params_to_json(tbs) + "\n", plan.out_path)
    return 0


def _heuristic_policy(args, plan, config):
    space = StateSpace(config)
    label = args.policy
    if label == "Optimal":
        return relative_value_iteration(config, options=plan.solver).policy
    if args.params:
        with open(args.params, encoding="utf-8") as fh:
            records = [params_from_json(line) for line in fh if line.strip()]
        kind = FOQParams if label.startswith("FOQ") else TBSParams
        matches = [r for r in records if isinstance(r, kind)]
        if not matches:
            raise ConfigurationError(f"{args.params} has no parameters for {label}")
        params = matches[0]
    else:
        sim = plan.sim
        tune = tune_foq if label.startswith("FOQ") else tune_tbs
        params = tune(config, sim.periods, sim.seed, sim.warmup)
    if label == "FOQ":
        return foq_policy(params, space)
    if label == "TBS":
        return tbs_policy(params, space)
    build = build_foq_plus if label == "FOQ+" else build_tbs_plus
    return build(config, params, options=plan.solver).policy


def _cmd_simulate(args, plan):
    config = _instance(args, plan)
    report = simulate(_heuristic_policy(args, plan, config), config, plan.sim)
    _write(",".join(REPORT_HEADER) + "\n" + report_record(report) + "\n", plan.out_path)
    return 0


def _emit(rows, plan, cells, command):
    text = emit_table(rows, plan.format, plan.out_path)
    if plan.out_path:
        write_manifest(run_manifest(plan, cells, command), manifest_path(plan.out_path))
    else:
        sys.stdout.write(text)
    failed = rows_failed(rows)
    for row in failed:
        print(f"error: cell {row.country}/{row.storage}/{row.rho:g}: {row.error}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_benchmark(args, plan):
    return _emit(run_benchmark_matrix(plan), plan, plan.cells, "benchmark")


def _cmd_policies(args, plan):
    return _emit(run_policy_matrix(plan), plan, plan.cells, "policies")


def _cmd_sweep(args, plan):
    return _emit(run_sensitivity_sweep(plan, args.axis), plan, sweep_cells(plan, args.axis), f"sweep {args.axis}")


_COMMANDS = {
    "solve": _cmd_solve,
    "tune": _cmd_tune,
    "simulate": _cmd_simulate,
    "benchmark": _cmd_benchmark,
    "policies": _cmd_policies,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        plan = _plan(args)
        return _COMMANDS[args.command](args, plan)
    except (ConfigurationError, CapacityError, ConvergenceError, OSError) as exc:
        print(f"h2dual {args.command}: {exc}", file=sys.stderr)
        return 2
