import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from h2dual.dynamics import (
    Action,
    State,
    StateSpace,
    build_kernel,
    enumerate_states,
    inventory_cost,
    order_cost,
    q_value,
    successor_distribution,
)
from h2dual.errors import CapacityError, ConfigurationError
from h2dual.model import (
    CostParams,
    DistributionSpec,
    QuantityGrid,
    ScenarioPreset,
    arrival_pmf,
    capacity_pmf,
    demand_pmf,
    preset_config,
)

from conftest import deterministic_config

MOROCCO = preset_config(ScenarioPreset("Morocco", "SC", 1.0))
NORWAY = preset_config(ScenarioPreset("Norway", "SC", 1.0))
UAE = preset_config(ScenarioPreset("UAE", "SC", 1.0))


def small_config(lead_local, lead_import, varl=0.5):
    grid = QuantityGrid(step=2000, max_order_local=4000, max_order_import=4000, max_inventory=8000)
    return replace(
        MOROCCO,
        grid=grid,
        lead_local=lead_local,
        lead_import=lead_import,
        capacity=DistributionSpec(2000, 0, 4000, varl, "capacity"),
        demand=DistributionSpec(4000, 0, 8000, varl, "demand"),
    )


# ---------------------------------------------------------------------------
# State space
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("cfg, size", [(NORWAY, 21), (MOROCCO, 231), (UAE, 2541)])
def test_state_counts(cfg, size):
    assert len(enumerate_states(cfg)) == size


def test_state_ceiling():
    with pytest.raises(CapacityError):
        enumerate_states(UAE, max_states=1000)


def test_enumeration_is_lexicographic_and_bijective():
    space = StateSpace(UAE)
    states = space.states
    keys = [(s.inventory, s.local_pipeline, s.import_pipeline) for s in states]
    assert keys == sorted(keys)
    assert space[0] == State(0, (), (0, 0))
    assert space[1] == State(0, (), (0, 2000))
    assert all(space.index(s) == i for i, s in enumerate(states))


@given(st.integers(0, 2540))
def test_index_round_trip(i):
    space = StateSpace(UAE)
    assert space.index(space[i]) == i


def test_index_rejects_bad_states():
    space = StateSpace(MOROCCO)
    with pytest.raises(ConfigurationError):
        space.index(State(1000, (), (0,)))
    with pytest.raises(ConfigurationError):
        space.index(State(2000, (), ()))
    with pytest.raises(ConfigurationError):
        space.index(State(42000, (), (0,)))


def test_pipeline_units_decode_the_index():
    cfg = small_config(lead_local=2, lead_import=4)
    space = StateSpace(cfg)
    lp, ip = space.pipeline_units("local"), space.pipeline_units("import")
    for i in range(0, space.size, 37):
        s = space[i]
        assert tuple(lp[i] * 2000) == s.local_pipeline
        assert tuple(ip[i] * 2000) == s.import_pipeline
        assert space.inventory_units[i] * 2000 == s.inventory


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def test_order_cost():
    costs = CostParams(5.76, 5.76, 2.8)
    assert order_cost(2000, 14000, costs) == pytest.approx(92.16)
    assert order_cost(0, 0, costs) == 0


def test_local_cost_is_charged_on_delivery():
    cfg = deterministic_config(capacity=4000, c_local=5.0, c_import=6.0, c_hold=0.0)
    (entry,) = successor_distribution(State(0, (), ()), Action(6000, 0), cfg)
    assert entry.stage_cost == pytest.approx(order_cost(4000, 0, cfg.costs) + inventory_cost(4000 - 14000, cfg.costs))


def test_inventory_cost():
    costs = CostParams(5.76, 5.76, 2.8, 30)
    assert inventory_cost(-2000, costs) == pytest.approx(60.0)
    assert inventory_cost(4000, costs) == pytest.approx(11.2)
    assert inventory_cost(0, costs) == 0
    assert inventory_cost(50000, costs, max_inventory=40000) == pytest.approx(112.0)


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------


def test_deterministic_config_has_single_successor():
    cfg = deterministic_config(lead_import=2)
    entries = successor_distribution(State(4000, (), (6000,)), Action(10000, 2000), cfg)
    assert len(entries) == 1 and entries[0].prob == 1.0
    space = StateSpace(cfg)
    # 4000 + 10000 - 14000 = 0 left, then 6000 arrives; 2000 enters the pipe
    assert space[entries[0].next_index] == State(6000, (), (2000,))


def enumerate_next_inventory(state, action, cfg):
    """Independent brute force over the joint (capacity, demand, arrival) support."""
    out = {}
    cap, dem = capacity_pmf(cfg), demand_pmf(cfg)
    arr = arrival_pmf(state.import_pipeline[0], cfg)
    for (k, pk), (d, pd), (a, pa) in itertools.product(
        zip(cap.support, cap.probs), zip(dem.support, dem.probs), zip(arr.support, arr.probs)
    ):
        nxt = min(max(state.inventory + min(k, action.local_request) - d, 0) + a, cfg.grid.max_inventory)
        out[int(nxt)] = out.get(int(nxt), 0.0) + pk * pd * pa
    return out


def test_pipelined_import_arrival():
    state = State(2000, (), (8000,))
    entries = successor_distribution(state, Action(0, 0), MOROCCO)
    space = StateSpace(MOROCCO)
    got = {}
    for e in entries:
        nxt = space[e.next_index]
        assert nxt.import_pipeline == (0,)
        got[nxt.inventory] = got.get(nxt.inventory, 0.0) + e.prob
    assert set(got) == {6000, 8000}
    expected = enumerate_next_inventory(state, Action(0, 0), MOROCCO)
    assert got.keys() == expected.keys()
    for k in got:
        assert got[k] == pytest.approx(expected[k], abs=1e-12)
    assert got[8000] == pytest.approx(arrival_pmf(8000, MOROCCO).prob(8000), abs=1e-12)


@given(
    i=st.integers(0, 2540),
    r=st.integers(0, 10),
    q=st.integers(0, 10),
)
def test_probability_conservation(i, r, q):
    space = StateSpace(UAE)
    entries = successor_distribution(space[i], Action(2000 * r, 2000 * q), UAE, space)
    assert abs(sum(e.prob for e in entries) - 1) <= 1e-10
    assert all(e.prob > 0 for e in entries)


def test_capacity_censoring_makes_large_requests_equivalent():
    grid = QuantityGrid(max_order_local=24000)
    cfg = replace(MOROCCO, grid=grid)
    s = State(6000, (), (4000,))
    a = successor_distribution(s, Action(20000, 2000), cfg)
    b = successor_distribution(s, Action(24000, 2000), cfg)
    assert a == b


def test_yield_pass_through():
    cfg = replace(MOROCCO, yield_loss=DistributionSpec(0.0, 0.0, 0.35, 0.0, "yield-loss"))
    space = StateSpace(cfg)
    for e in successor_distribution(State(0, (), (10000,)), Action(0, 0), cfg):
        # demand >= 6000 empties the stock, so the full 10000 is what remains
        assert space[e.next_index].inventory == 10000


def test_infeasible_action_is_rejected():
    with pytest.raises(ConfigurationError):
        successor_distribution(State(0, (), (0,)), Action(1000, 0), MOROCCO)
    with pytest.raises(ConfigurationError):
        successor_distribution(State(0, (), (0,)), Action(0, 22000), MOROCCO)


# ---------------------------------------------------------------------------
# q_value
# ---------------------------------------------------------------------------


def test_q_value_with_zero_values_is_expected_stage_cost():
    state, action = State(4000, (), (2000,)), Action(6000, 4000)
    entries = successor_distribution(state, action, MOROCCO)
    expected = sum(e.prob * e.stage_cost for e in entries)
    assert q_value(state, action, np.zeros(231), MOROCCO) == pytest.approx(expected, rel=1e-14)


def test_q_value_exact_demand_match():
    cfg = deterministic_config(lead_import=2)
    space = StateSpace(cfg)
    values = np.arange(space.size, dtype=float)
    state = State(14000, (), (0,))
    (entry,) = successor_distribution(state, Action(0, 0), cfg, space)
    assert entry.stage_cost == 0
    assert q_value(state, Action(0, 0), values, cfg, space) == values[entry.next_index]


def test_q_value_by_hand_over_demand():
    dem = demand_pmf(MOROCCO)
    c = MOROCCO.costs
    by_hand = 0.0
    for d, p in zip(dem.support, dem.probs):
        net = 14000 - d
        by_hand += p * (c.c_hold * max(net, 0) + c.c_penalty * max(-net, 0)) / 1000
    got = q_value(State(14000, (), (0,)), Action(0, 0), np.zeros(231), MOROCCO)
    assert got == pytest.approx(by_hand, rel=1e-13)


def test_myopic_cost_falls_with_inventory_until_crossover():
    space = StateSpace(NORWAY)
    zeros = np.zeros(space.size)
    costs = [q_value(space[i], Action(0, 0), zeros, NORWAY, space) for i in range(space.size)]
    turn = int(np.argmin(costs))
    assert turn > 0
    assert all(np.diff(costs[: turn + 1]) <= 1e-12)


# ---------------------------------------------------------------------------
# Vectorized kernel against the enumeration route
# ---------------------------------------------------------------------------


def assert_kernel_matches_enumeration(cfg, stride=1):
    kernel = build_kernel(cfg)
    space = kernel.space
    grid = cfg.grid
    for s in range(0, space.size, stride):
        for r, q in itertools.product(range(grid.n_local), range(grid.n_import)):
            a = kernel.action_index(r, q)
            entries = successor_distribution(space[s], Action(r * grid.step, q * grid.step), cfg, space)
            expected = {}
            for e in entries:
                expected[e.next_index] = expected.get(e.next_index, 0.0) + e.prob
            got = kernel.row_distribution(s, a)
            assert got.keys() == expected.keys(), (s, r, q)
            for k in got:
                assert got[k] == pytest.approx(expected[k], abs=1e-12)
            cost = sum(e.prob * e.stage_cost for e in entries)
            assert kernel.cost[s * kernel.n_actions + a] == pytest.approx(cost, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("lead_local, lead_import", [(0, 1), (0, 2), (1, 2), (2, 3), (0, 3)])
def test_kernel_matches_enumeration_on_small_grids(lead_local, lead_import):
    assert_kernel_matches_enumeration(small_config(lead_local, lead_import))


def test_kernel_matches_enumeration_on_morocco():
    assert_kernel_matches_enumeration(MOROCCO, stride=7)


def test_kernel_rows_are_stochastic():
    kernel = build_kernel(UAE)
    sums = np.asarray(kernel.matrix.sum(axis=1)).ravel()
    assert np.max(np.abs(sums - 1)) <= 1e-10
    assert kernel.matrix.shape == (2541 * 121, 2541)
