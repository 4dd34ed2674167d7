"""Problem instances: quantity grids, costs, uncertainty distributions, presets.

Quantities are tonnes of hydrogen and prices are EUR per kg.  One cost unit
is ``price * tonnes / 1000``, i.e. thousands of EUR per weekly period.
"""

from __future__ import annotations

import configparser
import io
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigurationError

COST_SCALE = 1000.0

# country -> (import lead time in weeks, landed import cost in EUR/kg)
COUNTRIES = {
    "Norway": (1, 8.62),
    "Morocco": (2, 5.76),
    "UAE": (3, 6.27),
}

# storage -> daily holding cost range in EUR/kg/day
STORAGE_DAILY_RANGE = {
    "SC": (0.2, 0.6),
    "CG": (1.1, 3.5),
    "LH": (2.0, 5.0),
}

STORAGE_ALIASES = {
    "sc": "SC",
    "saltcavern": "SC",
    "salt_cavern": "SC",
    "cg": "CG",
    "compressedgas": "CG",
    "compressed_gas": "CG",
    "lh": "LH",
    "liquidhydrogen": "LH",
    "liquid_hydrogen": "LH",
}

PENALTY_COST = 30.0
BASE_VARL = 0.5
DISTRIBUTION_KINDS = ("capacity", "demand", "yield-loss")


@dataclass(frozen=True)
class QuantityGrid:
    step: int = 2000
    max_order_local: int = 20000
    max_order_import: int = 20000
    max_inventory: int = 40000

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigurationError(f"grid step must be positive, got {self.step}")
        for name in ("max_order_local", "max_order_import", "max_inventory"):
            value = getattr(self, name)
            if value < 0 or value % self.step:
                raise ConfigurationError(
                    f"{name}={value} is not a non-negative multiple of step {self.step}"
                )

    @property
    def n_inventory(self) -> int:
        return self.max_inventory // self.step + 1

    @property
    def n_local(self) -> int:
        return self.max_order_local // self.step + 1

    @property
    def n_import(self) -> int:
        return self.max_order_import // self.step + 1

    def units(self, quantity) -> int:
        """Convert an on-grid quantity in tonnes to grid units."""
        q, r = divmod(quantity, self.step)
        if r:
            raise ConfigurationError(f"quantity {quantity} is off the {self.step} t grid")
        return int(q)


@dataclass(frozen=True)
class DistributionSpec:
    mean: float
    lower: float
    upper: float
    varl: float
    kind: str

    def __post_init__(self):
        if self.kind not in DISTRIBUTION_KINDS:
            raise ConfigurationError(f"unknown distribution kind {self.kind!r}")
        if not self.lower <= self.mean <= self.upper:
            raise ConfigurationError(
                f"{self.kind}: need lower <= mean <= upper, got "
                f"{self.lower}, {self.mean}, {self.upper}"
            )
        if self.varl < 0:
            raise ConfigurationError(f"{self.kind}: VarL must be >= 0, got {self.varl}")

    @property
    def sigma(self) -> float:
        return self.varl * (self.mean - self.lower)


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Probability mass function on an increasing set of quantities."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support)
        probs = np.asarray(self.probs, dtype=float)
        if support.shape != probs.shape or support.ndim != 1 or support.size == 0:
            raise ConfigurationError("support and probs must be equal-length 1-d arrays")
        if np.any(np.diff(support) <= 0):
            raise ConfigurationError("support must be strictly increasing")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"probabilities must be >= 0 and sum to 1 (sum={probs.sum()!r})")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def point(cls, value) -> "DiscreteDistribution":
        return cls(np.array([value]), np.array([1.0]))

    def __eq__(self, other):
        if not isinstance(other, DiscreteDistribution):
            return NotImplemented
        return np.array_equal(self.support, other.support) and np.array_equal(self.probs, other.probs)

    def __len__(self):
        return self.support.size

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def prob(self, value) -> float:
        hit = np.flatnonzero(self.support == value)
        return float(self.probs[hit[0]]) if hit.size else 0.0

    def as_dict(self) -> dict:
        return {v.item(): float(p) for v, p in zip(self.support, self.probs)}

    def on_grid(self, step) -> bool:
        return bool(np.all(np.asarray(self.support) % step == 0))


@dataclass(frozen=True)
class CostParams:
    c_local: float
    c_import: float
    c_hold: float
    c_penalty: float = PENALTY_COST

    def __post_init__(self):
        for name in ("c_local", "c_import", "c_hold", "c_penalty"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.c_penalty <= self.c_import:
            warnings.warn(
                f"c_penalty={self.c_penalty} <= c_import={self.c_import}: never importing is trivially optimal",
                stacklevel=3,
            )

    def scaled(self, factor: float) -> "CostParams":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return CostParams(
                self.c_local * factor,
                self.c_import * factor,
                self.c_hold * factor,
                self.c_penalty * factor,
            )


def capacity_spec(varl: float = BASE_VARL) -> DistributionSpec:
    return DistributionSpec(mean=10000, lower=0, upper=20000, varl=varl, kind="capacity")


def demand_spec(varl: float = BASE_VARL) -> DistributionSpec:
    return DistributionSpec(mean=14000, lower=6000, upper=22000, varl=varl, kind="demand")


def yield_loss_spec(varl: float = BASE_VARL) -> DistributionSpec:
    return DistributionSpec(mean=0.175, lower=0.0, upper=0.35, varl=varl, kind="yield-loss")


@dataclass(frozen=True)
class ProblemConfig:
    grid: QuantityGrid
    lead_local: int
    lead_import: int
    costs: CostParams
    capacity: DistributionSpec = field(default_factory=capacity_spec)
    demand: DistributionSpec = field(default_factory=demand_spec)
    yield_loss: DistributionSpec = field(default_factory=yield_loss_spec)
    label: str = ""

    def __post_init__(self):
        if not self.lead_import > self.lead_local >= 0:
            raise ConfigurationError(
                f"lead times must satisfy lead_import > lead_local >= 0, "
                f"got {self.lead_import}, {self.lead_local}"
            )
        if self.capacity.kind != "capacity" or self.demand.kind != "demand":
            raise ConfigurationError("capacity/demand specs carry the wrong kind")
        if self.yield_loss.kind != "yield-loss":
            raise ConfigurationError("yield_loss spec carries the wrong kind")
        if not 0.0 <= self.yield_loss.lower <= self.yield_loss.upper <= 1.0:
            raise ConfigurationError("yield loss must live in [0, 1]")
        step = self.grid.step
        for spec in (self.capacity, self.demand):
            if spec.lower % step or spec.upper % step or spec.lower < 0:
                raise ConfigurationError(f"{spec.kind} bounds must be non-negative grid multiples")
        if self.demand.upper > self.grid.max_inventory:
            raise ConfigurationError("max_inventory must cover the largest single-period demand")

    def with_costs(self, **changes) -> "ProblemConfig":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return replace(self, costs=replace(self.costs, **changes))

    def scaled_costs(self, factor: float) -> "ProblemConfig":
        return replace(self, costs=self.costs.scaled(factor))


@dataclass(frozen=True)
class ScenarioPreset:
    country: str
    storage: str
    rho: float

    def __post_init__(self):
        if self.country not in COUNTRIES:
            raise ConfigurationError(f"unknown country {self.country!r}; choose from {sorted(COUNTRIES)}")
        object.__setattr__(self, "storage", normalize_storage(self.storage))
        if not self.rho > 0:
            raise ConfigurationError(f"rho must be positive, got {self.rho}")

    @classmethod
    def parse(cls, text: str) -> "ScenarioPreset":
        """Parse a ``country/storage/rho`` triple such as ``Morocco/SC/1.0``."""
        parts = text.split("/")
        if len(parts) != 3:
            raise ConfigurationError(f"preset must look like country/storage/rho, got {text!r}")
        return cls(parts[0], parts[1], float(parts[2]))

    def __str__(self):
        return f"{self.country}/{self.storage}/{self.rho:g}"


def normalize_storage(name: str) -> str:
    key = name.replace("-", "").replace(" ", "").lower()
    if key not in STORAGE_ALIASES:
        raise ConfigurationError(f"unknown storage type {name!r}")
    return STORAGE_ALIASES[key]


def weekly_holding_cost(storage: str) -> float:
    lo, hi = STORAGE_DAILY_RANGE[normalize_storage(storage)]
    return round(7 * (lo + hi) / 2, 10)


def preset_config(
    preset: ScenarioPreset,
    varl_c: float = BASE_VARL,
    varl_d: float = BASE_VARL,
    varl_y: float = BASE_VARL,
    grid: QuantityGrid | None = None,
) -> ProblemConfig:
    lead_import, c_import = COUNTRIES[preset.country]
    costs = CostParams(
        c_local=round(preset.rho * c_import, 10),
        c_import=c_import,
        c_hold=weekly_holding_cost(preset.storage),
        c_penalty=PENALTY_COST,
    )
    return ProblemConfig(
        grid=grid or QuantityGrid(),
        lead_local=0,
        lead_import=lead_import,
        costs=costs,
        capacity=capacity_spec(varl_c),
        demand=demand_spec(varl_d),
        yield_loss=yield_loss_spec(varl_y),
        label=str(preset),
    )


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def discretize_truncated_normal(spec: DistributionSpec, grid_step) -> DiscreteDistribution:
    """Bin a normal N(mean, sigma) onto the grid multiples in [lower, upper].

    Each support point g collects the mass of its rounding cell
    [g - step/2, g + step/2); the result is renormalized over the support,
    i.e. the normal is truncated to the union of the cells.  A zero (or
    negligible) sigma gives a point mass at the grid point nearest the mean.
    """
    lo_unit = math.ceil(spec.lower / grid_step)
    hi_unit = math.floor(spec.upper / grid_step)
    if hi_unit < lo_unit:
        raise ConfigurationError(f"{spec.kind}: no grid point inside [{spec.lower}, {spec.upper}]")
    support = np.arange(lo_unit, hi_unit + 1, dtype=np.int64) * grid_step

    sigma = spec.sigma
    if sigma <= 1e-12 * grid_step:
        nearest = int(np.clip(math.floor(spec.mean / grid_step + 0.5), lo_unit, hi_unit))
        return DiscreteDistribution.point(nearest * grid_step)

    half = grid_step / 2.0
    upper_cdf = ndtr((support + half - spec.mean) / sigma)
    lower_cdf = ndtr((support - half - spec.mean) / sigma)
    mass = upper_cdf - lower_cdf
    total = mass.sum()
    if not total > 0:
        raise ConfigurationError(f"{spec.kind}: truncated normal has no mass on the grid")
    probs = mass / total
    probs /= probs.sum()
    return DiscreteDistribution(support, probs)


def capacity_pmf(config: ProblemConfig) -> DiscreteDistribution:
    return discretize_truncated_normal(config.capacity, config.grid.step)


def demand_pmf(config: ProblemConfig) -> DiscreteDistribution:
    return discretize_truncated_normal(config.demand, config.grid.step)


def truncated_normal_cdf(x, spec: DistributionSpec):
    """CDF of N(mean, sigma) truncated to [lower, upper] (sigma > 0)."""
    sigma = spec.sigma
    a = ndtr((spec.lower - spec.mean) / sigma)
    b = ndtr((spec.upper - spec.mean) / sigma)
    x = np.clip(x, spec.lower, spec.upper)
    return (ndtr((x - spec.mean) / sigma) - a) / (b - a)


def nearest_units(x):
    """Round a quantity in grid units to the nearest integer, ties upward."""
    # the small offset absorbs float noise at exact midpoints, e.g. 0.875 * 4
    return np.floor(np.asarray(x) + 0.5 + 1e-9).astype(np.int64)


def arrival_pmf(order_qty, config: ProblemConfig) -> DiscreteDistribution:
    """Distribution of the quantity that actually arrives from an import order.

    The arrived amount is ``(1 - loss) * order_qty`` rounded to the nearest
    grid point, with loss following the truncated normal of
    ``config.yield_loss``.  Grid-cell boundaries are mapped back to loss
    intervals and priced with the truncated-normal CDF.
    """
    grid = config.grid
    if not 0 <= order_qty <= grid.max_order_import:
        raise ConfigurationError(f"import order {order_qty} outside [0, {grid.max_order_import}]")
    n = grid.units(order_qty)
    if n == 0:
        return DiscreteDistribution.point(0)
    spec = config.yield_loss
    if spec.sigma == 0:
        k = int(nearest_units((1.0 - spec.mean) * n))
        return DiscreteDistribution.point(k * grid.step)

    k_min = int(nearest_units((1.0 - spec.upper) * n))
    k_max = int(nearest_units((1.0 - spec.lower) * n))
    ks = np.arange(k_min, k_max + 1)
    # arrival k  <=>  (1 - loss) n in [k - 1/2, k + 1/2)  <=>  loss in (1 - (k+1/2)/n, 1 - (k-1/2)/n]
    loss_hi = 1.0 - (ks - 0.5) / n
    loss_lo = 1.0 - (ks + 0.5) / n
    probs = truncated_normal_cdf(loss_hi, spec) - truncated_normal_cdf(loss_lo, spec)
    keep = probs > 0
    probs = probs[keep] / probs[keep].sum()
    return DiscreteDistribution(ks[keep] * grid.step, probs)


def loss_quantile(u, spec: DistributionSpec):
    """Inverse CDF of the yield-loss distribution, vectorized over ``u``."""
    u = np.asarray(u, dtype=float)
    if spec.sigma == 0:
        return np.full_like(u, spec.mean)
    sigma = spec.sigma
    a = ndtr((spec.lower - spec.mean) / sigma)
    b = ndtr((spec.upper - spec.mean) / sigma)
    x = spec.mean + sigma * ndtri(a + u * (b - a))
    return np.clip(x, spec.lower, spec.upper)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_SPEC_SECTIONS = {"capacity": "capacity", "demand": "demand", "yield": "yield-loss"}


def load_scenario(source) -> ProblemConfig:
    """Read an INI-style scenario file (path or open text stream)."""
    parser = configparser.ConfigParser()
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            parser.read_file(fh)
    else:
        parser.read_file(source)

    missing = [s for s in ("grid", "costs", "leads", *_SPEC_SECTIONS) if not parser.has_section(s)]
    if missing:
        raise ConfigurationError(f"scenario file lacks sections: {', '.join(missing)}")
    try:
        g = parser["grid"]
        grid = QuantityGrid(
            step=g.getint("step"),
            max_order_local=g.getint("max_order_local"),
            max_order_import=g.getint("max_order_import"),
            max_inventory=g.getint("max_inventory"),
        )
        c = parser["costs"]
        costs = CostParams(
            c_local=c.getfloat("c_local"),
            c_import=c.getfloat("c_import"),
            c_hold=c.getfloat("c_hold"),
            c_penalty=c.getfloat("c_penalty", fallback=PENALTY_COST),
        )
        specs = {}
        for section, kind in _SPEC_SECTIONS.items():
            s = parser[section]
            specs[section] = DistributionSpec(
                mean=s.getfloat("mean"),
                lower=s.getfloat("lower"),
                upper=s.getfloat("upper"),
                varl=s.getfloat("varl"),
                kind=kind,
            )
        leads = parser["leads"]
        return ProblemConfig(
            grid=grid,
            lead_local=leads.getint("lead_local"),
            lead_import=leads.getint("lead_import"),
            costs=costs,
            capacity=specs["capacity"],
            demand=specs["demand"],
            yield_loss=specs["yield"],
            label=parser.get("scenario", "label", fallback=""),
        )
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad scenario file: {exc}") from exc


def dump_scenario(config: ProblemConfig) -> str:
    parser = configparser.ConfigParser()
    parser["scenario"] = {"label": config.label}
    parser["grid"] = {
        "step": str(config.grid.step),
        "max_order_local": str(config.grid.max_order_local),
        "max_order_import": str(config.grid.max_order_import),
        "max_inventory": str(config.grid.max_inventory),
    }
    parser["costs"] = {k: repr(float(v)) for k, v in vars(config.costs).items()}
    parser["leads"] = {"lead_local": str(config.lead_local), "lead_import": str(config.lead_import)}
    for section, attr in (("capacity", "capacity"), ("demand", "demand"), ("yield", "yield_loss")):
        spec = getattr(config, attr)
        parser[section] = {k: repr(float(getattr(spec, k))) for k in ("mean", "lower", "upper", "varl")}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
