"""The inventory MDP: states, actions, stage costs and transitions.

States use the post-arrival convention: ``inventory`` already contains
everything that arrived at the start of the period, so a lead time of
``tau`` leaves ``tau - 1`` pipeline slots (oldest first).

Two routes compute transitions.  :func:`successor_distribution` enumerates
every joint outcome of (capacity, demand, yield) for one state-action pair
and is the reference definition.  :func:`build_kernel` assembles the whole
expected-cost vector and sparse transition matrix with array operations
for the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import CapacityError, ConfigurationError
from .model import (
    COST_SCALE,
    CostParams,
    ProblemConfig,
    arrival_pmf,
    capacity_pmf,
    demand_pmf,
)

DEFAULT_MAX_STATES = 5_000_000


@dataclass(frozen=True)
class State:
    inventory: int
    local_pipeline: tuple = ()
    import_pipeline: tuple = ()


@dataclass(frozen=True)
class Action:
    local_request: int
    import_order: int


@dataclass(frozen=True)
class TransitionEntry:
    next_index: int
    prob: float
    stage_cost: float


class StateSpace:
    """Dense, lexicographic enumeration of (inventory, local pipe, import pipe).

    Indexing is mixed-radix with the inventory most significant, so
    ``index(space[i]) == i`` and the order is the same on every run.
    """

    def __init__(self, config: ProblemConfig):
        grid = config.grid
        self.step = grid.step
        self.n_inventory = grid.n_inventory
        self.n_local = grid.n_local
        self.n_import = grid.n_import
        self.local_slots = max(config.lead_local - 1, 0)
        self.import_slots = config.lead_import - 1
        self.n_local_pipes = self.n_local ** self.local_slots
        self.n_import_pipes = self.n_import ** self.import_slots
        self.n_pipes = self.n_local_pipes * self.n_import_pipes
        self.size = self.n_inventory * self.n_pipes

    def __len__(self):
        return self.size

    def __iter__(self):
        return (self[i] for i in range(self.size))

    def __getitem__(self, i: int) -> State:
        if not 0 <= i < self.size:
            raise IndexError(i)
        inv, rest = divmod(i, self.n_pipes)
        lidx, pidx = divmod(rest, self.n_import_pipes)
        local = _digits(lidx, self.n_local, self.local_slots)
        imports = _digits(pidx, self.n_import, self.import_slots)
        return State(
            inv * self.step,
            tuple(u * self.step for u in local),
            tuple(u * self.step for u in imports),
        )

    @property
    def states(self):
        return list(self)

    def index(self, state: State) -> int:
        if len(state.local_pipeline) != self.local_slots or len(state.import_pipeline) != self.import_slots:
            raise ConfigurationError(f"state {state} has the wrong pipeline lengths")
        inv = self._units(state.inventory, self.n_inventory)
        lidx = 0
        for q in state.local_pipeline:
            lidx = lidx * self.n_local + self._units(q, self.n_local)
        pidx = 0
        for q in state.import_pipeline:
            pidx = pidx * self.n_import + self._units(q, self.n_import)
        return (inv * self.n_local_pipes + lidx) * self.n_import_pipes + pidx

    def _units(self, quantity, levels):
        u, r = divmod(quantity, self.step)
        if r or not 0 <= u < levels:
            raise ConfigurationError(f"quantity {quantity} is not a valid grid level")
        return int(u)

    @cached_property
    def inventory_units(self) -> np.ndarray:
        return np.arange(self.size) // self.n_pipes

    @cached_property
    def local_pipe_index(self) -> np.ndarray:
        return (np.arange(self.size) % self.n_pipes) // self.n_import_pipes

    @cached_property
    def import_pipe_index(self) -> np.ndarray:
        return np.arange(self.size) % self.n_import_pipes

    def pipeline_units(self, which: str) -> np.ndarray:
        """(size, slots) array of pipeline contents in grid units, oldest first."""
        if which == "local":
            idx, base, slots = self.local_pipe_index, self.n_local, self.local_slots
        else:
            idx, base, slots = self.import_pipe_index, self.n_import, self.import_slots
        out = np.empty((self.size, slots), dtype=np.int64)
        rest = idx.copy()
        for col in range(slots - 1, -1, -1):
            rest, out[:, col] = np.divmod(rest, base)
        return out


def _digits(value, base, width):
    out = [0] * width
    for pos in range(width - 1, -1, -1):
        value, out[pos] = divmod(value, base)
    return out


def enumerate_states(config: ProblemConfig, max_states: int = DEFAULT_MAX_STATES) -> StateSpace:
    space = StateSpace(config)
    if space.size > max_states:
        raise CapacityError(
            f"{space.size} states exceed the ceiling of {max_states}; use a coarser grid or shorter leads"
        )
    return space


def order_cost(delivered_local, import_order, costs: CostParams) -> float:
    """Purchase cost: the local term is charged on what was delivered."""
    return (costs.c_local * delivered_local + costs.c_import * import_order) / COST_SCALE


def inventory_cost(net_after_demand, costs: CostParams, max_inventory=None) -> float:
    held = max(net_after_demand, 0)
    if max_inventory is not None:
        held = min(held, max_inventory)
    short = max(-net_after_demand, 0)
    return (costs.c_hold * held + costs.c_penalty * short) / COST_SCALE


def check_action(action: Action, config: ProblemConfig) -> None:
    grid = config.grid
    for qty, cap, name in (
        (action.local_request, grid.max_order_local, "local_request"),
        (action.import_order, grid.max_order_import, "import_order"),
    ):
        if qty % grid.step or not 0 <= qty <= cap:
            raise ConfigurationError(f"{name}={qty} infeasible (grid {grid.step}, max {cap})")


def successor_distribution(
    state: State, action: Action, config: ProblemConfig, space: StateSpace | None = None
) -> list[TransitionEntry]:
    """Enumerate next states and stage costs for one state-action pair.

    Outcomes sharing the same successor and the same stage cost are merged.
    """
    space = space or StateSpace(config)
    space.index(state)
    check_action(action, config)
    costs = config.costs
    cap_inv = config.grid.max_inventory
    q_imp = action.import_order

    arriving = state.import_pipeline[0] if state.import_pipeline else q_imp
    arrivals = arrival_pmf(arriving, config)
    cap = capacity_pmf(config)
    dem = demand_pmf(config)

    merged: dict[tuple[int, float], float] = {}
    for k, pk in zip(cap.support.tolist(), cap.probs.tolist()):
        delivered = min(k, action.local_request)
        if config.lead_local == 0:
            on_hand, local_in = state.inventory + delivered, 0
        elif config.lead_local == 1:
            on_hand, local_in = state.inventory, delivered
        else:
            on_hand, local_in = state.inventory, state.local_pipeline[0]
        local_next = (state.local_pipeline + (delivered,))[1:] if space.local_slots else ()
        import_next = (state.import_pipeline + (q_imp,))[1:] if space.import_slots else ()
        for d, pd in zip(dem.support.tolist(), dem.probs.tolist()):
            net = on_hand - d
            cost = order_cost(delivered, q_imp, costs) + inventory_cost(net, costs, cap_inv)
            for a, pa in zip(arrivals.support.tolist(), arrivals.probs.tolist()):
                nxt = min(max(net, 0) + local_in + a, cap_inv)
                idx = space.index(State(nxt, local_next, import_next))
                key = (idx, cost)
                merged[key] = merged.get(key, 0.0) + pk * pd * pa
    return [TransitionEntry(idx, p, c) for (idx, c), p in sorted(merged.items()) if p > 0]


def q_value(state: State, action: Action, values, config: ProblemConfig, space: StateSpace | None = None) -> float:
    values = np.asarray(values, dtype=float)
    return sum(e.prob * (e.stage_cost + values[e.next_index]) for e in successor_distribution(state, action, config, space))


# ---------------------------------------------------------------------------
# Vectorized kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Kernel:
    """Expected stage costs and transition matrix for all state-action pairs.

    Row ``s * n_actions + a`` of ``matrix`` is the successor distribution
    of state ``s`` under action ``a``; actions are ordered local-major, so
    a lower action index means a lower local request, then a lower import.
    """

    config: ProblemConfig
    space: StateSpace
    matrix: sparse.csr_matrix
    cost: np.ndarray
    local_units: np.ndarray
    import_units: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.local_units.size

    @property
    def n_states(self) -> int:
        return self.space.size

    def action_index(self, local_units, import_units):
        return np.asarray(local_units) * self.space.n_import + np.asarray(import_units)

    def row_distribution(self, state_index: int, action_index: int) -> dict[int, float]:
        row = state_index * self.n_actions + action_index
        start, stop = self.matrix.indptr[row], self.matrix.indptr[row + 1]
        return dict(zip(self.matrix.indices[start:stop].tolist(), self.matrix.data[start:stop].tolist()))


def _pmf_units(dist, step, length):
    out = np.zeros(length)
    units = np.asarray(dist.support) // step
    np.add.at(out, units, dist.probs)
    return out


def _delivery_table(cap_probs, n_local):
    """table[r, k] = P(min(K, r) = k) for requests r in grid units."""
    tail = np.concatenate([np.cumsum(cap_probs[::-1])[::-1], [0.0]])
    table = np.zeros((n_local, n_local))
    for r in range(n_local):
        m = min(r, cap_probs.size - 1)
        table[r, :m] = cap_probs[:m]
        table[r, m] = tail[m]
    return table


def _shift_add(dist, shift_probs, length):
    """Distribution of X + Y for X ~ dist (last axis) and independent Y."""
    out = np.zeros(dist.shape[:-1] + (length,))
    for y, p in enumerate(shift_probs):
        if p:
            out[..., y : y + dist.shape[-1]] += p * dist
    return out


def build_kernel(config: ProblemConfig, space: StateSpace | None = None) -> Kernel:
    space = space or enumerate_states(config)
    grid = config.grid
    step = grid.step
    scale = step / COST_SCALE
    costs = config.costs
    n_inv, n_loc, n_imp = space.n_inventory, space.n_local, space.n_import
    inv_cap = n_inv - 1

    cap = capacity_pmf(config)
    cap_probs = _pmf_units(cap, step, int(cap.support[-1]) // step + 1)
    delivery = _delivery_table(cap_probs, n_loc)
    mean_delivery = delivery @ np.arange(n_loc)

    dem = demand_pmf(config)
    d_units = np.asarray(dem.support) // step
    d_max = int(d_units[-1])

    arrival = np.zeros((n_imp, n_imp))
    for m in range(n_imp):
        dist = arrival_pmf(m * step, config)
        arrival[m] = _pmf_units(dist, step, n_imp)

    # net stock after demand, offset by d_max so index 0 means -d_max units
    added = n_loc if config.lead_local == 0 else 1
    net = np.zeros((n_inv, added, n_inv + added - 1 + d_max))
    for i in range(n_inv):
        for du, pd in zip(d_units, dem.probs):
            lo = i - du + d_max
            if config.lead_local == 0:
                net[i, :, lo : lo + n_loc] += pd * delivery
            else:
                net[i, 0, lo] += pd
    levels = np.arange(net.shape[-1]) - d_max
    held = np.minimum(np.maximum(levels, 0), inv_cap)
    short = np.maximum(-levels, 0)
    inv_cost = net @ (costs.c_hold * held + costs.c_penalty * short) * scale

    # stock carried into next period, before arrivals
    carried = net[..., d_max:].copy()
    carried[..., 0] += net[..., :d_max].sum(axis=-1)

    if config.lead_local == 0:
        # local_key = request r
        base = carried
    elif config.lead_local == 1:
        # local_key = request r, its delivery arrives next period
        base = np.stack([_shift_add(carried[:, 0], delivery[r], carried.shape[-1] + n_loc - 1) for r in range(n_loc)], axis=1)
    else:
        # local_key = oldest pipeline entry, a known quantity
        shifts = np.eye(n_loc)
        base = np.stack([_shift_add(carried[:, 0], shifts[u], carried.shape[-1] + n_loc - 1) for u in range(n_loc)], axis=1)
    full = np.stack([_shift_add(base, arrival[m], base.shape[-1] + n_imp - 1) for m in range(n_imp)], axis=2)
    next_inv = full[..., :n_inv].copy()
    next_inv[..., inv_cap] += full[..., n_inv:].sum(axis=-1)
    # next_inv[i, local_key, m, j]

    r_act = np.repeat(np.arange(n_loc), n_imp)
    q_act = np.tile(np.arange(n_imp), n_loc)
    inv_s = space.inventory_units

    stage_local = costs.c_local * mean_delivery * scale
    if config.lead_local == 0:
        stage = inv_cost[:, r_act] + stage_local[r_act][None, :]
    else:
        stage = inv_cost[:, 0][:, None] + stage_local[r_act][None, :]
    stage = stage + (costs.c_import * q_act * scale)[None, :]
    cost = stage[inv_s].reshape(-1)

    if space.import_slots:
        top = n_imp ** (space.import_slots - 1)
        pidx = space.import_pipe_index
        m_arr = np.broadcast_to((pidx // top)[:, None], (space.size, r_act.size))
        p_next = (pidx % top)[:, None] * n_imp + q_act[None, :]
    else:
        m_arr = np.broadcast_to(q_act[None, :], (space.size, r_act.size))
        p_next = np.zeros((1, r_act.size), dtype=np.int64)

    if space.local_slots:
        top_l = n_loc ** (space.local_slots - 1)
        lidx = space.local_pipe_index
        key = np.broadcast_to((lidx // top_l)[:, None], (space.size, r_act.size))
        l_base = (lidx % top_l)[:, None] * n_loc
    else:
        key = np.broadcast_to(r_act[None, :], (space.size, r_act.size))

    probs = next_inv[inv_s[:, None], key, m_arr]  # (S, A, n_inv)
    inv_stride = space.n_pipes
    cols_inv = np.arange(n_inv) * inv_stride

    if space.local_slots:
        # new local slot receives the delivered quantity, independent of the inventory outcome
        probs = probs[..., :, None] * delivery[r_act][None, :, None, :]
        pipe_next = (l_base[..., None] + np.arange(n_loc)) * space.n_import_pipes + p_next[..., None]
        cols = cols_inv[None, None, :, None] + pipe_next[:, :, None, :]
    else:
        cols = cols_inv[None, None, :] + np.broadcast_to(p_next, (space.size, r_act.size))[..., None]

    n_rows = space.size * r_act.size
    cols = np.broadcast_to(cols, probs.shape).reshape(n_rows, -1)
    probs = probs.reshape(n_rows, -1)
    width = probs.shape[1]
    matrix = sparse.csr_matrix(
        (probs.ravel(), cols.ravel().astype(np.int64), np.arange(0, n_rows * width + 1, width)),
        shape=(n_rows, space.size),
    )
    matrix.eliminate_zeros()
    return Kernel(config, space, matrix, cost, r_act, q_act)
