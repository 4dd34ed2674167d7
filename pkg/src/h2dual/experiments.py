"""Experiment plans: benchmark matrices, policy matrices and sensitivity sweeps.

A plan names scenario cells (country x storage x rho x VarL triple).  Cells
are independent and may run in worker processes; rows come back in cell
order, so output tables do not depend on scheduling.  Every row of a cell
is simulated with the plan's seed, which gives common random numbers across
the policies compared inside the cell.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .dynamics import StateSpace, build_kernel
from .errors import ConfigurationError
from .heuristics import (
    build_foq_plus,
    build_tbs_plus,
    foq_policy,
    tbs_policy,
    tune_foq,
    tune_tbs,
)
from .model import COUNTRIES, BASE_VARL, ProblemConfig, ScenarioPreset, dump_scenario, normalize_storage, preset_config
from .simulator import IGNORE_MODES, SimOptions, benchmark_deviation, build_benchmark_variants, simulate_many
from .solver import SolverOptions, relative_value_iteration

WORKERS_ENV = "H2DUAL_WORKERS"
POLICY_LABELS = ("Optimal", "FOQ", "FOQ+", "TBS", "TBS+")
PLAN_POLICIES = POLICY_LABELS + ("benchmarks",)
SWEEP_AXES = ("rho_varl_c", "storage_cost", "varl_c", "varl_d", "varl_y")
TABLE_HEADER = (
    "country", "storage", "rho", "varl_c", "varl_d", "varl_y",
    "policy", "avg_cost", "gap_pct", "local_share_pct", "runtime_s",
)
ERROR_POLICY = "ERROR"
TABLE_FORMATS = ("csv", "markdown")


def _frange(start, stop, step):
    n = int(round((stop - start) / step))
    return tuple(round(start + k * step, 10) for k in range(n + 1))


DEFAULT_SWEEP_RHOS = _frange(0.5, 1.5, 0.1)
DEFAULT_SWEEP_VARLS = _frange(0.0, 1.0, 0.1)
DEFAULT_STORAGE_COSTS = _frange(0.5, 8.0, 0.5)


@dataclass(frozen=True)
class ExperimentPlan:
    countries: tuple = ("Morocco",)
    storages: tuple = ("SC", "CG", "LH")
    rhos: tuple = (0.6, 0.8, 1.0, 1.2, 1.4)
    varl_c: tuple = (BASE_VARL,)
    varl_d: tuple = (BASE_VARL,)
    varl_y: tuple = (BASE_VARL,)
    policies: tuple = PLAN_POLICIES
    sim: SimOptions = field(default_factory=SimOptions)
    solver: SolverOptions = field(default_factory=SolverOptions)
    tuning_periods: int | None = None
    ignored_as: str = "mean"
    sweep_rhos: tuple = DEFAULT_SWEEP_RHOS
    sweep_varls: tuple = DEFAULT_SWEEP_VARLS
    storage_costs: tuple = DEFAULT_STORAGE_COSTS
    record_runtime: bool = False
    out_path: str | None = None
    format: str = "csv"

    def __post_init__(self):
        for name in ("countries", "storages", "rhos", "varl_c", "varl_d", "varl_y", "policies"):
            if not getattr(self, name):
                raise ConfigurationError(f"plan selects no {name}")
        unknown = set(self.countries) - set(COUNTRIES)
        if unknown:
            raise ConfigurationError(f"unknown countries {sorted(unknown)}")
        object.__setattr__(self, "storages", tuple(normalize_storage(s) for s in self.storages))
        if any(not r > 0 for r in (*self.rhos, *self.sweep_rhos)):
            raise ConfigurationError("rho values must be positive")
        if any(v < 0 for v in (*self.varl_c, *self.varl_d, *self.varl_y, *self.sweep_varls)):
            raise ConfigurationError("VarL values must be non-negative")
        if any(not c > 0 for c in self.storage_costs):
            raise ConfigurationError("storage costs must be positive")
        bad = set(self.policies) - set(PLAN_POLICIES)
        if bad:
            raise ConfigurationError(f"unknown policies {sorted(bad)}; choose from {PLAN_POLICIES}")
        if self.ignored_as not in IGNORE_MODES:
            raise ConfigurationError(f"ignored_as must be one of {IGNORE_MODES}")
        if self.format not in TABLE_FORMATS:
            raise ConfigurationError(f"format must be one of {TABLE_FORMATS}")

    @property
    def cells(self) -> list["Cell"]:
        return [
            Cell(c, s, r, vc, vd, vy)
            for c, s, r, vc, vd, vy in itertools.product(
                self.countries, self.storages, self.rhos, self.varl_c, self.varl_d, self.varl_y
            )
        ]

    def as_dict(self) -> dict:
        data = asdict(self)
        data["sim"] = asdict(self.sim)
        data["solver"] = asdict(self.solver)
        return data


@dataclass(frozen=True)
class Cell:
    country: str
    storage: str
    rho: float
    varl_c: float = BASE_VARL
    varl_d: float = BASE_VARL
    varl_y: float = BASE_VARL
    c_hold: float | None = None

    def config(self) -> ProblemConfig:
        cfg = preset_config(ScenarioPreset(self.country, self.storage, self.rho), self.varl_c, self.varl_d, self.varl_y)
        if self.c_hold is not None:
            cfg = cfg.with_costs(c_hold=self.c_hold)
        return cfg

    @property
    def storage_label(self) -> str:
        """Storage column text; an overridden holding cost is shown as ``SC@2.5``."""
        return self.storage if self.c_hold is None else f"{self.storage}@{self.c_hold:g}"


@dataclass(frozen=True)
class ResultRow:
    country: str
    storage: str
    rho: float
    varl_c: float
    varl_d: float
    varl_y: float
    policy: str
    avg_cost: float
    gap_pct: float | None
    local_share_pct: float
    runtime_s: float = 0.0
    ci_halfwidth: float = 0.0
    error: str | None = None


def _row(cell: Cell, policy, report, gap, runtime) -> ResultRow:
    return ResultRow(
        cell.country, cell.storage_label, cell.rho, cell.varl_c, cell.varl_d, cell.varl_y, policy,
        report.avg_cost, gap, 100.0 * report.local_share, runtime, report.ci_halfwidth,
    )


def _error_row(cell: Cell, exc: Exception) -> ResultRow:
    nan = math.nan
    return ResultRow(
        cell.country, cell.storage_label, cell.rho, cell.varl_c, cell.varl_d, cell.varl_y,
        ERROR_POLICY, nan, None, nan, 0.0, nan, f"{type(exc).__name__}: {exc}",
    )


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled

    def __call__(self, fn, *args, **kwargs):
        start = time.perf_counter()
        out = fn(*args, **kwargs)
        return out, (time.perf_counter() - start if self.enabled else 0.0)


# ---------------------------------------------------------------------------
# Per-cell work
# ---------------------------------------------------------------------------


def _benchmark_cell(plan: ExperimentPlan, cell: Cell) -> list[ResultRow]:
    clock = _Clock(plan.record_runtime)
    cfg = cell.config()
    kernel = build_kernel(cfg)
    opt, t_opt = clock(relative_value_iteration, cfg, None, plan.solver, kernel)
    labels, policies, runtimes = ["Optimal"], [opt.policy], [t_opt]
    if "benchmarks" in plan.policies:
        for label, variant in build_benchmark_variants(cfg, plan.ignored_as).items():
            model_kernel = kernel if variant.config == cfg else None
            res, t = clock(relative_value_iteration, variant.config, variant.restriction, plan.solver, model_kernel)
            labels.append(label)
            policies.append(res.policy)
            runtimes.append(t)
    reports = simulate_many(policies, cfg, plan.sim)
    rows = []
    for label, report, t in zip(labels, reports, runtimes):
        if label == "Optimal" and "Optimal" not in plan.policies:
            continue
        gap = 0.0 if label == "Optimal" else benchmark_deviation(reports[0], report)
        rows.append(_row(cell, label, report, gap, t))
    return rows


def _policy_cell(plan: ExperimentPlan, cell: Cell) -> list[ResultRow]:
    clock = _Clock(plan.record_runtime)
    cfg = cell.config()
    space = StateSpace(cfg)
    kernel = build_kernel(cfg)
    periods = plan.tuning_periods or plan.sim.periods
    seed, warmup = plan.sim.seed, plan.sim.warmup
    wanted = set(plan.policies)
    policies, runtimes = {}, {}

    opt, runtimes["Optimal"] = clock(relative_value_iteration, cfg, None, plan.solver, kernel)
    policies["Optimal"] = opt.policy
    if wanted & {"FOQ", "FOQ+"}:
        foq, t_foq = clock(tune_foq, cfg, periods, seed, warmup)
        policies["FOQ"], runtimes["FOQ"] = foq_policy(foq, space), t_foq
        plus, t_plus = clock(build_foq_plus, cfg, foq, options=plan.solver, kernel=kernel)
        policies["FOQ+"], runtimes["FOQ+"] = plus.policy, t_foq + t_plus
    if wanted & {"TBS", "TBS+"}:
        tbs, t_tbs = clock(tune_tbs, cfg, periods, seed, warmup)
        policies["TBS"], runtimes["TBS"] = tbs_policy(tbs, space), t_tbs
        plus, t_plus = clock(build_tbs_plus, cfg, tbs, options=plan.solver, kernel=kernel)
        policies["TBS+"], runtimes["TBS+"] = plus.policy, t_tbs + t_plus

    labels = list(policies)
    reports = dict(zip(labels, simulate_many(policies.values(), cfg, plan.sim)))
    base = reports["Optimal"]
    rows = []
    for label in POLICY_LABELS:
        if label in wanted and label in reports:
            gap = 0.0 if label == "Optimal" else benchmark_deviation(base, reports[label])
            rows.append(_row(cell, label, reports[label], gap, runtimes[label]))
    return rows


def _sweep_cell(plan: ExperimentPlan, cell: Cell) -> list[ResultRow]:
    clock = _Clock(plan.record_runtime)
    cfg = cell.config()
    opt, t = clock(relative_value_iteration, cfg, None, plan.solver)
    report = simulate_many([opt.policy], cfg, plan.sim)[0]
    return [_row(cell, "Optimal", report, 0.0, t)]


_CELL_WORK = {"benchmark": _benchmark_cell, "policy": _policy_cell, "sweep": _sweep_cell}


def _run_cell(job):
    kind, plan, cell = job
    try:
        return _CELL_WORK[kind](plan, cell)
    except Exception as exc:  # one failing cell must not abort the matrix
        return [_error_row(cell, exc)]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def _run_cells(kind: str, plan: ExperimentPlan, cells, workers: int | None = None) -> list[ResultRow]:
    jobs = [(kind, plan, cell) for cell in cells]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        chunks = map(_run_cell, jobs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_cell, jobs))
    return [row for chunk in chunks for row in chunk]


def run_benchmark_matrix(plan: ExperimentPlan, workers: int | None = None) -> list[ResultRow]:
    """Optimal policy plus the five benchmark variants, per cell."""
    return _run_cells("benchmark", plan, plan.cells, workers)


def run_policy_matrix(plan: ExperimentPlan, workers: int | None = None) -> list[ResultRow]:
    """Optimal, FOQ, FOQ+, TBS and TBS+, per cell."""
    return _run_cells("policy", plan, plan.cells, workers)


def sweep_cells(plan: ExperimentPlan, axis: str) -> list[Cell]:
    """Scenario points of a sensitivity sweep; non-swept parameters stay at base."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    cells = []
    for country, storage in itertools.product(plan.countries, plan.storages):
        if axis == "rho_varl_c":
            points = [Cell(country, storage, r, varl_c=v) for v in plan.sweep_varls for r in plan.sweep_rhos]
        elif axis == "storage_cost":
            points = [Cell(country, storage, r, c_hold=h) for r in plan.rhos for h in plan.storage_costs]
        else:
            key = axis
            points = [Cell(country, storage, r, **{key: v}) for r in plan.rhos for v in plan.sweep_varls]
        cells.extend(points)
    return cells


def run_sensitivity_sweep(plan: ExperimentPlan, axis: str, workers: int | None = None) -> list[ResultRow]:
    """Optimal-policy local share at every point of one sweep axis."""
    return _run_cells("sweep", plan, sweep_cells(plan, axis), workers)


# ---------------------------------------------------------------------------
# Tables and manifests
# ---------------------------------------------------------------------------


def _fmt2(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.2f}"


def _table_values(row: ResultRow) -> list[str]:
    return [
        row.country, row.storage, f"{row.rho:g}", f"{row.varl_c:g}", f"{row.varl_d:g}", f"{row.varl_y:g}",
        row.policy, _fmt2(row.avg_cost), _fmt2(row.gap_pct), _fmt2(row.local_share_pct), _fmt2(row.runtime_s),
    ]


def format_table(rows, fmt: str = "csv") -> str:
    rows = list(rows)
    if not rows:
        raise ConfigurationError("no rows to write")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        writer.writerows(_table_values(r) for r in rows)
        return buf.getvalue()
    if fmt == "markdown":
        numeric = set(TABLE_HEADER[7:]) | {"rho", "varl_c", "varl_d", "varl_y"}
        lines = ["| " + " | ".join(TABLE_HEADER) + " |"]
        lines.append("|" + "|".join("---:" if h in numeric else ":---" for h in TABLE_HEADER) + "|")
        lines += ["| " + " | ".join(_table_values(r)) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ConfigurationError(f"format must be one of {TABLE_FORMATS}, got {fmt!r}")


def emit_table(rows, fmt: str = "csv", out_path=None) -> str:
    """Render rows and write them to ``out_path`` when given; returns the text."""
    text = format_table(rows, fmt)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _parse_number(text):
    return None if text == "NA" else float(text)


def parse_table(text: str) -> list[ResultRow]:
    """Read a csv table written by :func:`emit_table`."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != TABLE_HEADER:
        raise ConfigurationError(f"unexpected header {header}")
    rows = []
    for rec in reader:
        country, storage, rho, vc, vd, vy, policy, cost, gap, share, runtime = rec
        rows.append(
            ResultRow(
                country, storage, float(rho), float(vc), float(vd), float(vy), policy,
                float(cost), _parse_number(gap), float(share), float(runtime),
            )
        )
    return rows


def config_hash(config: ProblemConfig) -> str:
    return hashlib.sha256(dump_scenario(config).encode()).hexdigest()[:16]


def run_manifest(plan: ExperimentPlan, cells, command: str) -> dict:
    """Reproducibility record: tool version, plan, seeds and per-cell config hashes."""
    return {
        "tool": "h2dual",
        "version": __version__,
        "command": command,
        "plan": plan.as_dict(),
        "seeds": {"simulation": plan.sim.seed, "tuning": plan.sim.seed},
        "cells": [
            {"cell": f"{c.country}/{c.storage_label}/{c.rho:g}/{c.varl_c:g}/{c.varl_d:g}/{c.varl_y:g}",
             "config_hash": config_hash(c.config()), "seed": plan.sim.seed}
            for c in cells
        ],
    }


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def manifest_path(out_path) -> str:
    return f"{out_path}.manifest.json"


# ---------------------------------------------------------------------------
# Plan files
# ---------------------------------------------------------------------------


def _floats(text):
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _words(text):
    return tuple(x.strip() for x in text.replace(";", ",").split(",") if x.strip())


def load_plan(source) -> ExperimentPlan:
    """Read an INI plan with sections [plan], [sim], [solver] and [sweep]."""
    parser = configparser.ConfigParser()
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            parser.read_file(fh)
    else:
        parser.read_file(source)
    kwargs = {}
    try:
        if parser.has_section("plan"):
            p = parser["plan"]
            for key in ("countries", "storages", "policies"):
                if key in p:
                    kwargs[key] = _words(p[key])
            for key in ("rhos", "varl_c", "varl_d", "varl_y"):
                if key in p:
                    kwargs[key] = _floats(p[key])
            for key in ("ignored_as", "format"):
                if key in p:
                    kwargs[key] = p[key].strip()
            if "out" in p:
                kwargs["out_path"] = p["out"].strip()
            if "record_runtime" in p:
                kwargs["record_runtime"] = p.getboolean("record_runtime")
            if "tuning_periods" in p:
                kwargs["tuning_periods"] = p.getint("tuning_periods")
        if parser.has_section("sim"):
            s = parser["sim"]
            kwargs["sim"] = SimOptions(**{k: s.getint(k) for k in ("periods", "warmup", "seed", "batches") if k in s})
        if parser.has_section("solver"):
            s = parser["solver"]
            opts = {}
            if "epsilon" in s:
                opts["epsilon"] = s.getfloat("epsilon")
            if "max_iterations" in s:
                opts["max_iterations"] = s.getint("max_iterations")
            kwargs["solver"] = SolverOptions(**opts)
        if parser.has_section("sweep"):
            s = parser["sweep"]
            for key in ("sweep_rhos", "sweep_varls", "storage_costs"):
                if key in s:
                    kwargs[key] = _floats(s[key])
    except ValueError as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad plan file: {exc}") from exc
    return ExperimentPlan(**kwargs)


def with_overrides(plan: ExperimentPlan, **changes) -> ExperimentPlan:
    """Replace plan fields, skipping ``None`` values."""
    return replace(plan, **{k: v for k, v in changes.items() if v is not None})


def rows_failed(rows) -> list[ResultRow]:
    return [r for r in rows if r.policy == ERROR_POLICY]


def mean_by_policy(rows, column: str) -> dict[str, float]:
    """Average of ``column`` over rows, grouped by policy label."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        value = getattr(r, column)
        if value is not None:
            groups.setdefault(r.policy, []).append(value)
    return {k: float(np.mean(v)) for k, v in groups.items()}
