"""Seeded Monte Carlo evaluation of policies under the true dynamics.

Random inputs come from counter-based Philox streams keyed by
``(seed, variable)``; the draw for period ``t`` is the ``t``-th counter of
its stream, so it does not depend on the policy being simulated.  Policies
simulated with the same seed therefore see exactly the same capacities,
demands and yield losses (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from numba import njit
from scipy import stats

from .dynamics import StateSpace
from .errors import ConfigurationError
from .model import (
    COST_SCALE,
    ProblemConfig,
    capacity_pmf,
    demand_pmf,
    discretize_truncated_normal,
    loss_quantile,
    nearest_units,
)
from .solver import ActionRestriction, Policy

STREAM_TAGS = {"capacity": 1, "demand": 2, "loss": 3}


@dataclass(frozen=True)
class SimOptions:
    """Run length and seeding; ``periods`` includes the ``warmup`` periods."""

    periods: int = 100_000
    warmup: int = 1_000
    seed: int = 0
    initial_state: int = 0
    batches: int = 100

    def __post_init__(self):
        if not 0 <= self.warmup < self.periods:
            raise ConfigurationError(f"need 0 <= warmup < periods, got {self.warmup}, {self.periods}")
        if not 2 <= self.batches <= self.periods - self.warmup:
            raise ConfigurationError(f"batches must lie in [2, {self.periods - self.warmup}], got {self.batches}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class SimulationReport:
    avg_cost: float
    ci_halfwidth: float
    local_share: float
    import_share: float
    fill_rate: float
    cap_hit_rate: float
    avg_inventory: float


REPORT_HEADER = tuple(f.name for f in fields(SimulationReport))


def report_record(report: SimulationReport, delimiter: str = ",") -> str:
    """One delimiter-separated line in the order of ``REPORT_HEADER``."""
    return delimiter.join(repr(float(getattr(report, name))) for name in REPORT_HEADER)


def parse_report_record(line: str, delimiter: str = ",") -> SimulationReport:
    values = [float(x) for x in line.strip().split(delimiter)]
    if len(values) != len(REPORT_HEADER):
        raise ConfigurationError(f"expected {len(REPORT_HEADER)} fields, got {len(values)}")
    return SimulationReport(*values)


def uniform_stream(seed: int, tag: str, periods: int) -> np.ndarray:
    """Uniforms ``u[0..periods)`` of the stream keyed by (seed, tag)."""
    key = np.random.SeedSequence([seed, STREAM_TAGS[tag]]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).random(periods)


def _inverse_cdf(dist, u, step):
    idx = np.searchsorted(dist.cdf(), u, side="right")
    idx = np.minimum(idx, len(dist) - 1)
    return (dist.support[idx] // step).astype(np.int64)


def draw_inputs(config: ProblemConfig, seed: int, periods: int):
    """Per-period capacity and demand (grid units) and yield-loss fractions."""
    step = config.grid.step
    cap = _inverse_cdf(capacity_pmf(config), uniform_stream(seed, "capacity", periods), step)
    dem = _inverse_cdf(demand_pmf(config), uniform_stream(seed, "demand", periods), step)
    loss = loss_quantile(uniform_stream(seed, "loss", periods), config.yield_loss)
    return cap, dem, loss


def _policy_tables(policies, space: StateSpace, config: ProblemConfig):
    step = config.grid.step
    local = np.empty((len(policies), space.size), dtype=np.int64)
    imports = np.empty_like(local)
    for b, policy in enumerate(policies):
        if len(policy) != space.size:
            raise ConfigurationError(f"policy covers {len(policy)} states, model has {space.size}")
        policy.action_indices(config.grid)  # validates grid and bounds
        local[b] = policy.local // step
        imports[b] = policy.imports // step
    return local, imports


@njit(cache=True)
def _run_paths(local_tab, import_tab, cap, dem, arrivals, start, unit_costs, layout, warmup, batches):
    """Advance every policy along the shared input path.

    ``arrivals[t, n]`` is the arrived quantity (grid units) of an ``n``-unit
    import whose yield is realized in period ``t``.  Returns per-policy batch
    cost sums and the totals (local, import, shortage, inventory, cap hits).
    """
    n_pol = local_tab.shape[0]
    periods = cap.shape[0]
    tau_l, ls, islots, n_local, n_import, max_inv = layout
    c_l, c_i, c_h, c_p = unit_costs
    counted = periods - warmup
    batch_cost = np.zeros((n_pol, batches))
    totals = np.zeros((n_pol, 5))
    lpipe = np.empty(max(ls, 1), np.int64)
    ipipe = np.empty(max(islots, 1), np.int64)
    for b in range(n_pol):
        inv = start[0]
        for k in range(ls):
            lpipe[k] = start[1 + k]
        for k in range(islots):
            ipipe[k] = start[1 + ls + k]
        for t in range(periods):
            state = inv
            for k in range(ls):
                state = state * n_local + lpipe[k]
            for k in range(islots):
                state = state * n_import + ipipe[k]
            r = local_tab[b, state]
            q = import_tab[b, state]
            delivered = min(cap[t], r)
            local_in = 0
            on_hand = inv
            if tau_l == 0:
                on_hand = inv + delivered
            elif tau_l == 1:
                local_in = delivered
            else:
                local_in = lpipe[0]
            arrived = arrivals[t, ipipe[0] if islots > 0 else q]
            net = on_hand - dem[t]
            stock = max(net, 0)
            short = stock - net
            raw_next = stock + local_in + arrived
            if t >= warmup:
                cost = c_l * delivered + c_i * q + c_h * min(stock, max_inv) + c_p * short
                batch_cost[b, ((t - warmup) * batches) // counted] += cost
                totals[b, 0] += delivered
                totals[b, 1] += arrived
                totals[b, 2] += short
                totals[b, 3] += inv
                if raw_next > max_inv:
                    totals[b, 4] += 1
            for k in range(ls - 1):
                lpipe[k] = lpipe[k + 1]
            if ls > 0:
                lpipe[ls - 1] = delivered
            for k in range(islots - 1):
                ipipe[k] = ipipe[k + 1]
            if islots > 0:
                ipipe[islots - 1] = q
            inv = min(raw_next, max_inv)
    return batch_cost, totals


def simulate_many(policies, config: ProblemConfig, options: SimOptions | None = None) -> list[SimulationReport]:
    """Simulate several policies on one shared sample path (common random numbers)."""
    options = options or SimOptions()
    policies = list(policies)
    if not policies:
        return []
    space = StateSpace(config)
    if not 0 <= options.initial_state < space.size:
        raise ConfigurationError(f"initial state {options.initial_state} out of range")
    local_tab, import_tab = _policy_tables(policies, space, config)
    cap, dem, loss = draw_inputs(config, options.seed, options.periods)
    grid, costs = config.grid, config.costs
    arrivals = nearest_units((1.0 - loss)[:, None] * np.arange(grid.n_import)[None, :])

    first = space[options.initial_state]
    start = np.array(
        [first.inventory, *first.local_pipeline, *first.import_pipeline], dtype=np.int64
    ) // grid.step
    unit = grid.step / COST_SCALE
    unit_costs = np.array([costs.c_local, costs.c_import, costs.c_hold, costs.c_penalty]) * unit
    layout = np.array(
        [config.lead_local, space.local_slots, space.import_slots, grid.n_local, grid.n_import, grid.n_inventory - 1],
        dtype=np.int64,
    )
    batch_cost, totals = _run_paths(
        local_tab, import_tab, cap, dem, arrivals, start, unit_costs, layout, options.warmup, options.batches
    )

    counted = options.periods - options.warmup
    per_batch = np.bincount((np.arange(counted) * options.batches) // counted, minlength=options.batches)
    batch_means = batch_cost / per_batch
    avg_cost = batch_cost.sum(axis=1) / counted
    t_crit = stats.t.ppf(0.975, options.batches - 1)
    halfwidth = t_crit * batch_means.std(axis=1, ddof=1) / math.sqrt(options.batches)
    total_demand = dem[options.warmup :].sum()

    reports = []
    for b in range(len(policies)):
        local, imported, short, inv_sum, hits = totals[b]
        supply = local + imported
        share = local / supply if supply > 0 else 0.0
        reports.append(
            SimulationReport(
                avg_cost=float(avg_cost[b]),
                ci_halfwidth=float(halfwidth[b]),
                local_share=float(share),
                import_share=float(1.0 - share) if supply > 0 else 0.0,
                fill_rate=float(1.0 - short / total_demand) if total_demand > 0 else 1.0,
                cap_hit_rate=float(hits / counted),
                avg_inventory=float(inv_sum / counted * grid.step),
            )
        )
    return reports


def simulate(policy: Policy, config: ProblemConfig, options: SimOptions | None = None) -> SimulationReport:
    return simulate_many([policy], config, options)[0]


# ---------------------------------------------------------------------------
# Benchmarks: single sourcing and models that ignore an uncertainty
# ---------------------------------------------------------------------------

BENCHMARK_LABELS = ("OnlyLocal", "OnlyImport", "NoNo", "YesNo", "NoYes")
IGNORE_MODES = ("mean", "ideal")


@dataclass(frozen=True)
class BenchmarkVariant:
    """A model to solve plus the restriction to solve it under.

    The resulting policy is always evaluated on the true configuration.
    """

    label: str
    config: ProblemConfig
    restriction: ActionRestriction


def truncated_normal_mean(spec) -> float:
    if spec.sigma == 0:
        return float(spec.mean)
    alpha = (spec.lower - spec.mean) / spec.sigma
    beta = (spec.upper - spec.mean) / spec.sigma
    mass = stats.norm.cdf(beta) - stats.norm.cdf(alpha)
    return float(spec.mean + spec.sigma * (stats.norm.pdf(alpha) - stats.norm.pdf(beta)) / mass)


def _deterministic_capacity(config: ProblemConfig, ignored_as: str):
    spec, step = config.capacity, config.grid.step
    if ignored_as == "ideal":
        value = spec.upper
    else:
        mean = discretize_truncated_normal(spec, step).mean()
        value = step * int(nearest_units(mean / step))
    value = min(max(value, spec.lower), spec.upper)
    return replace(spec, mean=value, varl=0.0)


def _deterministic_yield(config: ProblemConfig, ignored_as: str):
    spec = config.yield_loss
    value = spec.lower if ignored_as == "ideal" else round(truncated_normal_mean(spec), 4)
    return replace(spec, mean=value, varl=0.0)


def build_benchmark_variants(config: ProblemConfig, ignored_as: str = "mean") -> dict[str, BenchmarkVariant]:
    """Single-sourcing restrictions and models that disregard capacity or yield risk.

    With ``ignored_as="mean"`` an ignored uncertainty becomes a point mass at
    its mean (capacity snapped to the grid, loss rounded to 4 decimals).
    ``"ideal"`` instead assumes full capacity and no loss.
    """
    if ignored_as not in IGNORE_MODES:
        raise ConfigurationError(f"ignored_as must be one of {IGNORE_MODES}, got {ignored_as!r}")
    cap = _deterministic_capacity(config, ignored_as)
    loss = _deterministic_yield(config, ignored_as)
    full = ActionRestriction.full()
    return {
        "OnlyLocal": BenchmarkVariant("OnlyLocal", config, ActionRestriction.local_only()),
        "OnlyImport": BenchmarkVariant("OnlyImport", config, ActionRestriction.import_only()),
        "NoNo": BenchmarkVariant("NoNo", replace(config, capacity=cap, yield_loss=loss), full),
        "YesNo": BenchmarkVariant("YesNo", replace(config, yield_loss=loss), full),
        "NoYes": BenchmarkVariant("NoYes", replace(config, capacity=cap), full),
    }


def benchmark_deviation(opt_report: SimulationReport, variant_report: SimulationReport) -> float | None:
    """Percent cost increase over the optimal policy; ``None`` when that cost is 0."""
    if opt_report.avg_cost == 0:
        return None
    return 100.0 * (variant_report.avg_cost - opt_report.avg_cost) / opt_report.avg_cost
