import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from h2dual.model import CostParams, DistributionSpec, ProblemConfig, QuantityGrid

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


def spec(kind, mean, lower, upper, varl=0.0):
    return DistributionSpec(mean=mean, lower=lower, upper=upper, varl=varl, kind=kind)


def deterministic_config(
    capacity=20000,
    demand=14000,
    loss=0.0,
    c_local=5.76,
    c_import=5.76,
    c_hold=2.8,
    c_penalty=30.0,
    lead_import=1,
    grid=None,
):
    """Point-mass capacity, demand and yield loss on the preset grid."""
    grid = grid or QuantityGrid()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        costs = CostParams(c_local, c_import, c_hold, c_penalty)
    return ProblemConfig(
        grid=grid,
        lead_local=0,
        lead_import=lead_import,
        costs=costs,
        capacity=spec("capacity", capacity, 0, grid.max_order_local),
        demand=spec("demand", demand, 0, max(demand, 0)),
        yield_loss=spec("yield-loss", loss, 0.0, 0.35),
        label="deterministic",
    )


def random_tiny_config(rng: np.random.Generator, max_policies=10**6):
    """A random instance small enough for exhaustive policy enumeration.

    At most 5 inventory levels, at most 3 order levels per source and an
    import lead time of 1 or 2.
    """
    step = 2000
    while True:
        n_inv = int(rng.integers(2, 6))
        n_local = int(rng.integers(1, 4))
        n_import = int(rng.integers(1, 4))
        lead_import = int(rng.integers(1, 3))
        n_states = n_inv * n_import ** (lead_import - 1)
        if (n_local * n_import) ** n_states <= max_policies:
            break
    grid = QuantityGrid(step, (n_local - 1) * step, (n_import - 1) * step, (n_inv - 1) * step)
    max_inv = grid.max_inventory

    def draw_spec(kind, top):
        lo, hi = sorted(int(x) * step for x in rng.integers(0, top // step + 1, size=2))
        mean = float(rng.uniform(lo, hi))
        return spec(kind, mean, lo, hi, float(rng.choice([0.0, 0.3, 0.7, 1.2])))

    # demand must reach at least one grid step so stock can always drain
    d_hi = int(rng.integers(1, max_inv // step + 1)) * step
    d_lo = int(rng.integers(0, d_hi // step + 1)) * step
    demand = spec("demand", float(rng.uniform(max(d_lo, 0.6 * step), d_hi)), d_lo, d_hi, float(rng.choice([0.0, 0.5, 1.0])))

    c_import = float(rng.uniform(1, 10))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        costs = CostParams(
            c_local=float(rng.uniform(1, 12)),
            c_import=c_import,
            c_hold=float(rng.uniform(0, 6)),
            c_penalty=float(rng.uniform(c_import, 40)),
        )
    loss_hi = float(rng.uniform(0.05, 0.6))
    return ProblemConfig(
        grid=grid,
        lead_local=0,
        lead_import=lead_import,
        costs=costs,
        capacity=draw_spec("capacity", max(grid.max_order_local, step)),
        demand=demand,
        yield_loss=spec("yield-loss", float(rng.uniform(0, loss_hi)), 0.0, loss_hi, float(rng.choice([0.0, 0.5, 1.0]))),
        label="tiny",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
