"""Practitioner policies: fixed order quantities and tailored base-surge.

FOQ and TBS are tuned by exhaustive simulation over their parameter grids.
Every candidate runs on the same sample path, so cost differences between
candidates are not masked by sampling noise.  FOQ+ and TBS+ widen the tuned
parameters into a band and let value iteration pick actions inside it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import Kernel, StateSpace
from .errors import ConfigurationError
from .model import ProblemConfig, QuantityGrid
from .simulator import SimOptions, simulate_many
from .solver import ActionRestriction, Policy, SolveResult, SolverOptions, relative_value_iteration

MIN_TUNING_PERIODS = 10_000
DEFAULT_WIDTH = 2


def _check_quantity(value, step, upper, name):
    if value % step or not 0 <= value <= upper:
        raise ConfigurationError(f"{name}={value} must be a multiple of {step} in [0, {upper}]")


@dataclass(frozen=True)
class FOQParams:
    q_local: int
    q_import: int

    def validate(self, grid: QuantityGrid) -> None:
        _check_quantity(self.q_local, grid.step, grid.max_order_local, "q_local")
        _check_quantity(self.q_import, grid.step, grid.max_order_import, "q_import")


@dataclass(frozen=True)
class TBSParams:
    threshold: int
    q_import: int

    def validate(self, grid: QuantityGrid) -> None:
        _check_quantity(self.threshold, grid.step, grid.max_inventory, "threshold")
        _check_quantity(self.q_import, grid.step, grid.max_order_import, "q_import")


@dataclass(frozen=True)
class BoxBounds:
    local_min: int
    local_max: int
    import_min: int
    import_max: int

    def __post_init__(self):
        if self.local_min > self.local_max or self.import_min > self.import_max:
            raise ConfigurationError(f"empty box {self}")

    @classmethod
    def around(cls, center: FOQParams, width_steps: int, grid: QuantityGrid) -> "BoxBounds":
        """``center`` widened by ``width_steps`` grid steps, clamped to the order ranges."""
        if width_steps < 0:
            raise ConfigurationError(f"width_steps must be >= 0, got {width_steps}")
        w = width_steps * grid.step
        return cls(
            max(center.q_local - w, 0),
            min(center.q_local + w, grid.max_order_local),
            max(center.q_import - w, 0),
            min(center.q_import + w, grid.max_order_import),
        )

    def restriction(self) -> ActionRestriction:
        return ActionRestriction.box(self.local_min, self.local_max, self.import_min, self.import_max)


def _sim_options(periods, seed, warmup):
    if periods < MIN_TUNING_PERIODS:
        raise ConfigurationError(f"tuning needs at least {MIN_TUNING_PERIODS} periods, got {periods}")
    return SimOptions(periods=periods, warmup=warmup, seed=seed)


# ---------------------------------------------------------------------------
# FOQ
# ---------------------------------------------------------------------------


def foq_policy(params: FOQParams, space: StateSpace) -> Policy:
    return Policy.constant(space.size, params.q_local, params.q_import)


def foq_cost_table(config: ProblemConfig, periods: int = 100_000, seed: int = 0, warmup: int = 1_000) -> np.ndarray:
    """Simulated average cost of every constant pair, shape (n_local, n_import)."""
    grid = config.grid
    space = StateSpace(config)
    pairs = [(l, i) for l in range(grid.n_local) for i in range(grid.n_import)]
    policies = [foq_policy(FOQParams(l * grid.step, i * grid.step), space) for l, i in pairs]
    reports = simulate_many(policies, config, _sim_options(periods, seed, warmup))
    return np.array([r.avg_cost for r in reports]).reshape(grid.n_local, grid.n_import)


def tune_foq(config: ProblemConfig, periods: int = 100_000, seed: int = 0, warmup: int = 1_000) -> FOQParams:
    """Best constant pair; ties go to the smaller total, then the smaller import."""
    table = foq_cost_table(config, periods, seed, warmup)
    l, i = min(np.ndindex(table.shape), key=lambda li: (table[li], li[0] + li[1], li[1]))
    step = config.grid.step
    return FOQParams(int(l * step), int(i * step))


def build_foq_plus(
    config: ProblemConfig,
    center: FOQParams,
    width_steps: int = DEFAULT_WIDTH,
    options: SolverOptions | None = None,
    kernel: Kernel | None = None,
) -> SolveResult:
    center.validate(config.grid)
    box = BoxBounds.around(center, width_steps, config.grid)
    return relative_value_iteration(config, box.restriction(), options, kernel)


# ---------------------------------------------------------------------------
# TBS
# ---------------------------------------------------------------------------


def tbs_local_request(threshold, inventory, max_order_local):
    return np.minimum(np.maximum(threshold - np.asarray(inventory), 0), max_order_local)


def tbs_policy(params: TBSParams, space: StateSpace) -> Policy:
    """Order up to the threshold locally (capped); import a fixed amount."""
    inventory = space.inventory_units * space.step
    local = tbs_local_request(params.threshold, inventory, (space.n_local - 1) * space.step)
    return Policy(local, np.full(space.size, params.q_import))


def tbs_cost_table(config: ProblemConfig, periods: int = 100_000, seed: int = 0, warmup: int = 1_000) -> np.ndarray:
    """Simulated average cost of every (threshold, import) pair, shape (n_inventory, n_import)."""
    grid = config.grid
    space = StateSpace(config)
    pairs = [(d, i) for d in range(grid.n_inventory) for i in range(grid.n_import)]
    policies = [tbs_policy(TBSParams(d * grid.step, i * grid.step), space) for d, i in pairs]
    reports = simulate_many(policies, config, _sim_options(periods, seed, warmup))
    return np.array([r.avg_cost for r in reports]).reshape(grid.n_inventory, grid.n_import)


def tune_tbs(config: ProblemConfig, periods: int = 100_000, seed: int = 0, warmup: int = 1_000) -> TBSParams:
    """Best (threshold, import) pair; ties go to the smaller threshold, then the smaller import."""
    table = tbs_cost_table(config, periods, seed, warmup)
    d, i = min(np.ndindex(table.shape), key=lambda di: (table[di], di[0], di[1]))
    step = config.grid.step
    return TBSParams(int(d * step), int(i * step))


def build_tbs_plus(
    config: ProblemConfig,
    params: TBSParams,
    width_steps: int = DEFAULT_WIDTH,
    options: SolverOptions | None = None,
    kernel: Kernel | None = None,
) -> SolveResult:
    """Threshold rule for the local order, import chosen within ``q_import +- width``."""
    grid = config.grid
    params.validate(grid)
    if width_steps < 0:
        raise ConfigurationError(f"width_steps must be >= 0, got {width_steps}")
    w = width_steps * grid.step
    lo = max(params.q_import - w, 0)
    hi = min(params.q_import + w, grid.max_order_import)
    return relative_value_iteration(config, ActionRestriction.tbs_plus(params.threshold, lo, hi), options, kernel)


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------

_KINDS = {"foq": FOQParams, "tbs": TBSParams}


def params_to_json(params) -> str:
    kind = next(k for k, cls in _KINDS.items() if isinstance(params, cls))
    return json.dumps({"kind": kind, **asdict(params)}, sort_keys=True)


def params_from_json(text: str):
    data = json.loads(text)
    try:
        cls = _KINDS[data.pop("kind")]
        return cls(**{k: int(v) for k, v in data.items()})
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"not a heuristic parameter record: {text!r}") from exc
