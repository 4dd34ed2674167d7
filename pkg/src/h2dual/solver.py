"""Average-cost solvers: relative value iteration and evaluation oracles."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .dynamics import Action, Kernel, StateSpace, build_kernel
from .errors import CapacityError, ConfigurationError, ConvergenceError
from .model import ProblemConfig, QuantityGrid


@dataclass(frozen=True)
class SolverOptions:
    epsilon: float = 1e-4
    max_iterations: int = 100_000
    reference_state: int = 0
    # actions within this fraction of the largest |value| of the minimum count as ties
    tie_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")

    def scaled(self, factor: float) -> "SolverOptions":
        return SolverOptions(self.epsilon * factor, self.max_iterations, self.reference_state, self.tie_tolerance)


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary deterministic policy: one (local request, import order) per state, in tonnes."""

    local: np.ndarray
    imports: np.ndarray

    def __post_init__(self):
        local = np.asarray(self.local, dtype=np.int64)
        imports = np.asarray(self.imports, dtype=np.int64)
        if local.shape != imports.shape or local.ndim != 1:
            raise ConfigurationError("policy arrays must be 1-d and of equal length")
        local.setflags(write=False)
        imports.setflags(write=False)
        object.__setattr__(self, "local", local)
        object.__setattr__(self, "imports", imports)

    def __len__(self):
        return self.local.size

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return np.array_equal(self.local, other.local) and np.array_equal(self.imports, other.imports)

    def action(self, state_index: int) -> Action:
        return Action(int(self.local[state_index]), int(self.imports[state_index]))

    @classmethod
    def constant(cls, n_states: int, local: int, imports: int) -> "Policy":
        return cls(np.full(n_states, local), np.full(n_states, imports))

    @classmethod
    def from_action_indices(cls, indices, grid: QuantityGrid) -> "Policy":
        local_u, import_u = np.divmod(np.asarray(indices), grid.n_import)
        return cls(local_u * grid.step, import_u * grid.step)

    def action_indices(self, grid: QuantityGrid) -> np.ndarray:
        if np.any(self.local % grid.step) or np.any(self.imports % grid.step):
            raise ConfigurationError("policy actions are off the grid")
        lu, iu = self.local // grid.step, self.imports // grid.step
        if lu.min(initial=0) < 0 or lu.max(initial=0) >= grid.n_local:
            raise ConfigurationError("local request outside the action set")
        if iu.min(initial=0) < 0 or iu.max(initial=0) >= grid.n_import:
            raise ConfigurationError("import order outside the action set")
        return lu * grid.n_import + iu


@dataclass(frozen=True, eq=False)
class SolveResult:
    policy: Policy
    gain: float
    bias: np.ndarray
    span_residual: float
    iterations: int


_MODES = ("full", "fixed", "box", "tbs", "tbs_plus", "local_only", "import_only")


@dataclass(frozen=True)
class ActionRestriction:
    """Admissible actions per state.

    ``local`` and ``imports`` are inclusive (lo, hi) ranges in tonnes; for the
    threshold modes ``threshold`` fixes the local request at
    ``min(max(0, threshold - inventory), max_order_local)``.
    """

    mode: str = "full"
    local: tuple | None = None
    imports: tuple | None = None
    threshold: int | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigurationError(f"unknown restriction mode {self.mode!r}")
        for rng in (self.local, self.imports):
            if rng is not None and rng[0] > rng[1]:
                raise ConfigurationError(f"empty range {rng}")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def fixed(cls, local: int, imports: int):
        return cls("fixed", (local, local), (imports, imports))

    @classmethod
    def box(cls, local_lo, local_hi, import_lo, import_hi):
        return cls("box", (local_lo, local_hi), (import_lo, import_hi))

    @classmethod
    def tbs(cls, threshold: int, imports: int):
        return cls("tbs", None, (imports, imports), threshold)

    @classmethod
    def tbs_plus(cls, threshold: int, import_lo: int, import_hi: int):
        return cls("tbs_plus", None, (import_lo, import_hi), threshold)

    @classmethod
    def local_only(cls):
        return cls("local_only", None, (0, 0))

    @classmethod
    def import_only(cls):
        return cls("import_only", (0, 0), None)

    def _check(self, grid: QuantityGrid):
        for rng, cap in ((self.local, grid.max_order_local), (self.imports, grid.max_order_import)):
            if rng is None:
                continue
            for q in rng:
                if q % grid.step or not 0 <= q <= cap:
                    raise ConfigurationError(f"restriction bound {q} off grid or outside [0, {cap}]")
        if self.threshold is not None:
            if self.threshold % grid.step or not 0 <= self.threshold <= grid.max_inventory:
                raise ConfigurationError(f"threshold {self.threshold} off grid or outside [0, {grid.max_inventory}]")

    def mask(self, space: StateSpace, grid: QuantityGrid) -> np.ndarray:
        """Boolean (n_states, n_actions) admissibility table."""
        self._check(grid)
        local_q = np.repeat(np.arange(grid.n_local), grid.n_import) * grid.step
        import_q = np.tile(np.arange(grid.n_import), grid.n_local) * grid.step
        ok = np.ones(local_q.size, dtype=bool)
        if self.local is not None:
            ok &= (local_q >= self.local[0]) & (local_q <= self.local[1])
        if self.imports is not None:
            ok &= (import_q >= self.imports[0]) & (import_q <= self.imports[1])
        table = np.broadcast_to(ok, (space.size, ok.size))
        if self.threshold is not None:
            inv = space.inventory_units * grid.step
            rule = np.minimum(np.maximum(self.threshold - inv, 0), grid.max_order_local)
            table = table & (local_q[None, :] == rule[:, None])
        return np.array(table)


STALL_WINDOW = 200
STALL_RATIO = 0.9


def span(x) -> float:
    return float(np.max(x) - np.min(x))


class _Stalled(Exception):
    pass


def _sweep_loop(q_of, reduce, values, options, damping, budget):
    """Iterate ``V <- V + damping * (TV - V)`` until ``span(TV - V) < epsilon``.

    ``TV - V`` is the undamped Bellman difference, so the reported span and
    the gain bracket ``[min, max]`` do not depend on the damping.
    """
    ref = options.reference_state
    history = []
    res = np.inf
    for it in range(1, budget + 1):
        q = q_of(values)
        best = reduce(q)
        diff = best - values
        res = span(diff)
        if res < options.epsilon:
            return values, q, best, diff, res, it
        history.append(res)
        if len(history) >= 2 * STALL_WINDOW and min(history[-STALL_WINDOW:]) > STALL_RATIO * min(history[:-STALL_WINDOW]):
            raise _Stalled(values, res, it)
        damped = values + damping * diff
        values = damped - damped[ref]
    raise ConvergenceError(
        f"no convergence to span < {options.epsilon} in {options.max_iterations} sweeps (last span {res:.3g})",
        span=res,
        iterations=options.max_iterations,
    )


def _relative_sweeps(q_of, reduce, n_states, options):
    """Run undamped sweeps; on a stall continue half-damped.

    A stall means the span lost less than 10% over the last window, the
    signature of a (nearly) periodic chain.

    The half-damped map ``V + (TV - V) / 2`` is the lazy-chain transform:
    same greedy actions, same gain, but no periodic oscillation.
    """
    values = np.zeros(n_states)
    try:
        out = _sweep_loop(q_of, reduce, values, options, 1.0, options.max_iterations)
        return (*out, 1.0)
    except _Stalled as stall:
        values, _, used = stall.args
    try:
        out = _sweep_loop(q_of, reduce, values, options, 0.5, max(options.max_iterations - used, 1))
    except _Stalled as stall:
        # the lazy chain cannot oscillate, so a second stall means the gain is
        # state-dependent (several closed classes) or convergence is hopeless
        _, res, more = stall.args
        raise ConvergenceError(
            f"span stuck at {res:.3g} after {used + more} sweeps; the chain may have several recurrent classes",
            span=res,
            iterations=used + more,
        ) from None
    return (*out[:5], out[5] + used, 0.5)


def relative_value_iteration(
    config: ProblemConfig,
    restriction: ActionRestriction | None = None,
    options: SolverOptions | None = None,
    kernel: Kernel | None = None,
) -> SolveResult:
    """Minimize long-run average cost over the restricted action sets.

    Synchronous sweeps ``W = min_a (c + P V)``; stop once
    ``span(W - V) < epsilon``; otherwise ``V <- W - W[ref]``.  The gain is
    the midpoint of the last difference, which brackets it from both sides.
    """
    restriction = restriction or ActionRestriction.full()
    options = options or SolverOptions()
    kernel = kernel or build_kernel(config)
    n_states, n_actions = kernel.n_states, kernel.n_actions
    if not 0 <= options.reference_state < n_states:
        raise ConfigurationError(f"reference state {options.reference_state} out of range")

    mask = restriction.mask(kernel.space, config.grid)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ConfigurationError(f"restriction {restriction} leaves some states without actions")
    rows = np.flatnonzero(mask.ravel())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    P = kernel.matrix[rows]
    c = kernel.cost[rows]
    ref = options.reference_state

    values, q, best, diff, res, it, damping = _relative_sweeps(
        lambda v: c + P @ v,
        lambda q: np.minimum.reduceat(q, starts),
        n_states,
        options,
    )
    gain = 0.5 * (diff.max() + diff.min())
    tol = options.tie_tolerance * float(np.max(np.abs(best)))
    within = q <= np.repeat(best + tol, counts)
    owner = np.repeat(np.arange(n_states), counts)
    hits = np.flatnonzero(within)
    _, first = np.unique(owner[hits], return_index=True)
    chosen = rows[hits[first]] % n_actions
    policy = Policy.from_action_indices(chosen, config.grid)
    return SolveResult(policy, float(gain), values, res, it)


def _policy_rows(policy: Policy, kernel: Kernel):
    if len(policy) != kernel.n_states:
        raise ConfigurationError(f"policy covers {len(policy)} states, model has {kernel.n_states}")
    actions = policy.action_indices(kernel.config.grid)
    rows = np.arange(kernel.n_states) * kernel.n_actions + actions
    return kernel.matrix[rows], kernel.cost[rows]


def exact_policy_gain(
    policy: Policy,
    config: ProblemConfig,
    tolerance: float = 1e-9,
    kernel: Kernel | None = None,
    max_iterations: int = 100_000,
) -> float:
    """Long-run average cost of a fixed policy by relative policy evaluation.

    A periodic chain keeps the span from shrinking; the evaluation then
    continues on the half-lazy chain ``(I + P) / 2``, which has the same gain.
    """
    kernel = kernel or build_kernel(config)
    P, c = _policy_rows(policy, kernel)
    options = SolverOptions(epsilon=tolerance, max_iterations=max_iterations)
    *_, diff, _, _, _ = _relative_sweeps(lambda v: c + P @ v, lambda q: q, c.size, options)
    return float(0.5 * (diff.max() + diff.min()))


def _lazy_squares(P: np.ndarray, max_squarings: int):
    """Yield ``M^(2^k)`` for the lazy chain ``M = (I + P) / 2``, k = 1, 2, ..."""
    M = 0.5 * (P + np.eye(P.shape[-1]))
    for _ in range(max_squarings):
        M = M @ M
        M /= M.sum(axis=-1, keepdims=True)
        yield M


def limiting_matrix(P: np.ndarray, max_squarings: int = 80) -> np.ndarray:
    """Cesaro limit of a stack of stochastic matrices, shape (..., n, n).

    Powers of the lazy chain ``(I + P) / 2`` converge to the same limit for
    every chain, periodic or multichain, so repeated squaring suffices.
    """
    prev = None
    for M in _lazy_squares(P, max_squarings):
        if prev is not None and np.max(np.abs(M - prev)) < 1e-15:
            break
        prev = M
    return M


def policy_gain_vector(P_rows, c_rows, max_squarings: int = 80) -> np.ndarray:
    """Per-state long-run average cost ``P* c`` for stacked policies.

    Squaring stops once ``M c`` settles.  A nearly decomposable chain may
    settle on a plateau before its rare leaks mix; the plateau differs from
    the limit by roughly the leak probability.
    """
    c_rows = np.asarray(c_rows)
    tol = 1e-13 * max(1.0, float(np.max(np.abs(c_rows), initial=0.0)))
    g = None
    for M in _lazy_squares(P_rows, max_squarings):
        nxt = np.einsum("...ij,...j->...i", M, c_rows)
        if g is not None and np.max(np.abs(nxt - g)) <= tol:
            return nxt
        g = nxt
    return g


def brute_force_optimal_gain(
    config: ProblemConfig, max_policies: int = 10**6, kernel: Kernel | None = None, chunk: int = 8192
) -> float:
    """Minimum average cost over every stationary deterministic policy.

    Each policy is evaluated exactly through its Cesaro-limit matrix, which
    is also valid for multichain policies; the optimal gain is the
    per-state minimum and must come out state-independent.
    """
    kernel = kernel or build_kernel(config)
    n_states, n_actions = kernel.n_states, kernel.n_actions
    if n_actions**n_states > max_policies:
        raise CapacityError(f"{n_actions}^{n_states} policies exceed the limit of {max_policies}")
    P = kernel.matrix.toarray().reshape(n_states, n_actions, n_states)
    c = kernel.cost.reshape(n_states, n_actions)
    states = np.arange(n_states)

    best = np.full(n_states, np.inf)
    policies = itertools.product(range(n_actions), repeat=n_states)
    while True:
        block = np.array(list(itertools.islice(policies, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        gains = policy_gain_vector(P[states, block], c[states, block])
        best = np.minimum(best, gains.min(axis=0))

    scale = max(1.0, float(np.max(np.abs(best))))
    if span(best) > 1e-9 * scale:
        raise ConfigurationError(f"optimal gain depends on the start state: {best}")
    return float(best.mean())


def export_solution(result: SolveResult, config: ProblemConfig, stream, delimiter: str = ",") -> None:
    """Write one row per state: state fields, chosen action and bias."""
    space = StateSpace(config)
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    header = ["state", "inventory"]
    header += [f"local_pipe_{k}" for k in range(space.local_slots)]
    header += [f"import_pipe_{k}" for k in range(space.import_slots)]
    header += ["local_request", "import_order", "bias"]
    writer.writerow(header)
    for i, state in enumerate(space):
        writer.writerow(
            [i, state.inventory, *state.local_pipeline, *state.import_pipeline,
             int(result.policy.local[i]), int(result.policy.imports[i]), f"{result.bias[i]:.10g}"]
        )
