"""Game tree of a discrete Kyle game.

A Kyle game has an insider who progressively learns which of ``N`` states
holds, trades against a noise trader, and is priced by a market maker who only
sees the total order flow.  The tree is built once per :class:`GameSpec` and
exposes navigation tables that the pricing, solver and verification modules
walk in vectorised form.

Probabilities, values and prices are exact :class:`fractions.Fraction`
objects throughout this module.  The same kernels accept float arrays, which
is how the iterative solver uses them.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

DEFAULT_OUTCOME_CAP = 10**7


class SpecError(ValueError):
    """Invalid game specification."""


class TreeTooLarge(SpecError):
    """The outcome count exceeds the configured cap."""


class DomainError(ValueError):
    """A node or outcome is not part of the tree (or not after a start node)."""


class IncompletePricingError(KeyError):
    """A price is required at a flow history where none is defined."""

    def __init__(self, flow):
        self.flow = tuple(flow)
        super().__init__(f"no price defined at order flow {format_flow(self.flow)}")

    def __str__(self):
        return self.args[0]


def as_fraction(value) -> Fraction:
    """Coerce ints, Fractions, decimal strings, ``"p/q"`` strings and floats."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # repr round-trips, so 0.15 becomes 3/20 rather than its binary expansion
        return Fraction(repr(value))
    if isinstance(value, str):
        text = value.strip()
        try:
            return Fraction(text)
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a rational number: {value!r}") from exc
    return Fraction(value)


def format_flow(flow) -> str:
    return "(" + ", ".join(str(y) for y in flow) + ")"


def _canonical_partition(cells, n_states: int, period: int):
    seen: set[int] = set()
    out = []
    for cell in cells:
        members = tuple(sorted(int(i) for i in cell))
        if not members:
            raise SpecError(f"partition {period + 1} has an empty cell")
        for i in members:
            if not 0 <= i < n_states:
                raise SpecError(f"partition {period + 1}: state {i} out of range")
            if i in seen:
                raise SpecError(f"partition {period + 1}: state {i} appears twice")
            seen.add(i)
        out.append(members)
    if len(seen) != n_states:
        missing = sorted(set(range(n_states)) - seen)
        raise SpecError(f"partition {period + 1} does not cover states {missing}")
    return tuple(sorted(out))


@dataclass(frozen=True)
class GameSpec:
    """Declarative description of a discrete Kyle game.

    States are indexed ``0..N-1`` and ``values[i]`` is the true asset value in
    state ``i``; values must be nonincreasing.  ``partitions[t]`` is the
    insider's information partition in round ``t+1``; each must refine its
    predecessor.  After the last round the state is fully revealed.
    """

    horizon: int
    values: tuple
    partitions: tuple
    prior: tuple
    noise_support: tuple
    noise_probs: tuple
    trades: tuple

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise SpecError("horizon must be a positive integer")
        values = tuple(as_fraction(v) for v in self.values)
        n = len(values)
        if n == 0:
            raise SpecError("need at least one state")
        if any(values[i] < values[i + 1] for i in range(n - 1)):
            raise SpecError("values must be sorted nonincreasing")
        prior = tuple(as_fraction(p) for p in self.prior)
        _check_distribution(prior, n, "prior")
        noise = tuple(as_fraction(z) for z in self.noise_support)
        noise_probs = tuple(as_fraction(p) for p in self.noise_probs)
        _check_support(noise, "noise_support")
        _check_distribution(noise_probs, len(noise), "noise_probs")
        trades = tuple(as_fraction(x) for x in self.trades)
        _check_support(trades, "trades")
        if len(self.partitions) != self.horizon:
            raise SpecError(
                f"expected {self.horizon} partitions, got {len(self.partitions)}"
            )
        parts = tuple(
            _canonical_partition(cells, n, t) for t, cells in enumerate(self.partitions)
        )
        for t in range(len(parts) - 1):
            for fine in parts[t + 1]:
                owners = [c for c in parts[t] if set(fine) & set(c)]
                if len(owners) != 1 or not set(fine) <= set(owners[0]):
                    raise SpecError(
                        f"partition {t + 2} does not refine partition {t + 1}: "
                        f"cell {set(fine)} is not contained in any of "
                        f"{[set(c) for c in owners]}"
                    )
        set_("values", values)
        set_("prior", prior)
        set_("noise_support", noise)
        set_("noise_probs", noise_probs)
        set_("trades", trades)
        set_("partitions", parts)

    @classmethod
    def full_information(cls, values, prior, noise_support, noise_probs, trades,
                         horizon: int = 1) -> "GameSpec":
        """Game where the insider learns the state before the first round."""
        singletons = tuple((i,) for i in range(len(values)))
        return cls(horizon, tuple(values), (singletons,) * horizon, tuple(prior),
                   tuple(noise_support), tuple(noise_probs), tuple(trades))

    @property
    def n_states(self) -> int:
        return len(self.values)

    @property
    def flow_support(self) -> tuple:
        """E_Y: all attainable total order flows, sorted."""
        return tuple(sorted({x + z for x in self.trades for z in self.noise_support}))

    @property
    def n_outcomes(self) -> int:
        return self.n_states * (len(self.trades) * len(self.noise_support)) ** self.horizon


def _check_support(points, name):
    if not points:
        raise SpecError(f"{name} is empty")
    if len(set(points)) != len(points):
        raise SpecError(f"{name} has duplicates")


def _check_distribution(probs, length, name):
    if len(probs) != length:
        raise SpecError(f"{name} has {len(probs)} entries, expected {length}")
    if any(p <= 0 for p in probs):
        raise SpecError(f"{name} must be strictly positive")
    if sum(probs) != 1:
        raise SpecError(f"{name} sums to {sum(probs)}, not 1")


@dataclass(frozen=True)
class NodeKey:
    """A node of the tree identified by its history.

    ``cells[s]`` indexes the information cell revealed in round ``s+1`` (a
    position in ``spec.partitions[s]``; for terminal nodes the last entry is
    the resolved state).  ``trades`` and ``noise`` hold grid indices.
    """

    cells: tuple = ()
    trades: tuple = ()
    noise: tuple = ()

    @property
    def node_class(self) -> str:
        c, x, z = len(self.cells), len(self.trades), len(self.noise)
        if c == 0 and x == 0 and z == 0:
            return "V"
        if c == x == z:
            return "V"
        if c == x + 1 and x == z:
            # terminal nodes share this shape; GameTree.classify tells them apart
            return "X"
        if c == x and x == z + 1:
            return "Z"
        raise DomainError(f"malformed history {self}")

    @property
    def period(self) -> int:
        """Number of completed trading rounds before this node."""
        return len(self.noise)


@dataclass(frozen=True)
class Outcome:
    """Terminal node: resolved state plus the trade and noise grid indices."""

    state: int
    trades: tuple
    noise: tuple


class GameTree:
    """Enumerated game tree with vectorised navigation tables.

    X-nodes of round ``t`` (0-based) are numbered ``0..n_x[t]-1``.  For each of
    them the tree stores its information cell, the index of the order-flow
    history observed so far (base-``|E_Y|`` digits), the conditional prior
    over states given the cell, and where every ``(trade, noise)`` pair leads.
    """

    def __init__(self, spec: GameSpec, outcome_cap: int = DEFAULT_OUTCOME_CAP):
        if spec.n_outcomes > outcome_cap:
            raise TreeTooLarge(
                f"game has {spec.n_outcomes} outcomes, above the cap of {outcome_cap}"
            )
        self.spec = spec
        T, N = spec.horizon, spec.n_states
        K, L = len(spec.trades), len(spec.noise_support)
        self.T, self.N, self.K, self.L = T, N, K, L
        self.flow_values = spec.flow_support
        self.Y = len(self.flow_values)
        y_index = {y: j for j, y in enumerate(self.flow_values)}
        self.y_of = np.array(
            [[y_index[x + z] for z in spec.noise_support] for x in spec.trades], dtype=np.int64
        )

        # noise kernel M[k, y] = zeta(y - x_k), zero when y - x_k is not a noise value
        M = np.zeros((K, self.Y), dtype=object)
        for k in range(K):
            for l in range(L):
                M[k, self.y_of[k, l]] = spec.noise_probs[l]
        self.noise_kernel = M
        self.trade_values = np.array(spec.trades, dtype=object)
        self.noise_probs = np.array(spec.noise_probs, dtype=object)
        self.state_values = np.array(spec.values, dtype=object)
        self.prior = np.array(spec.prior, dtype=object)

        cell_mass = [
            [sum((spec.prior[i] for i in cell), Fraction(0)) for cell in part]
            for part in spec.partitions
        ]
        self.cell_mass = cell_mass
        state_cell = [
            {i: c for c, cell in enumerate(part) for i in cell} for part in spec.partitions
        ]
        self.state_cell = state_cell

        self.keys: list[list[NodeKey]] = []
        self.cell: list[np.ndarray] = []
        self.flow: list[np.ndarray] = []
        self.weights: list[np.ndarray] = []
        self.member: list[np.ndarray] = []
        self.parent: list[np.ndarray] = []
        self.child: list[np.ndarray] = []
        self.child_weights: list[np.ndarray] = []

        keys = [NodeKey((c,), (), ()) for c in range(len(spec.partitions[0]))]
        parent = np.zeros((len(keys), 3), dtype=np.int64) - 1
        flows = np.zeros(len(keys), dtype=np.int64)
        for t in range(T):
            part = spec.partitions[t]
            cells = np.array([k.cells[-1] for k in keys], dtype=np.int64)
            member = np.zeros((len(keys), N), dtype=bool)
            weights = np.zeros((len(keys), N), dtype=object)
            for c, cell in enumerate(part):
                rows = cells == c
                for i in cell:
                    member[rows, i] = True
                    weights[rows, i] = spec.prior[i] / cell_mass[t][c]
            self.keys.append(keys)
            self.cell.append(cells)
            self.flow.append(flows)
            self.member.append(member)
            self.weights.append(weights)
            self.parent.append(parent)
            if t == T - 1:
                break
            nxt = spec.partitions[t + 1]
            subcells = [
                [d for d, sub in enumerate(nxt) if set(sub) <= set(cell)] for cell in part
            ]
            J = max(len(s) for s in subcells)
            child = np.full((len(keys), K, L, J), -1, dtype=np.int64)
            cw = np.zeros((len(keys), J), dtype=object)
            new_keys, new_parent, new_flows = [], [], []
            for a, key in enumerate(keys):
                c = key.cells[-1]
                for j, d in enumerate(subcells[c]):
                    cw[a, j] = cell_mass[t + 1][d] / cell_mass[t][c]
                for k in range(K):
                    for l in range(L):
                        for j, d in enumerate(subcells[c]):
                            child[a, k, l, j] = len(new_keys)
                            new_keys.append(
                                NodeKey(key.cells + (d,), key.trades + (k,), key.noise + (l,))
                            )
                            new_parent.append((a, k, l))
                            new_flows.append(flows[a] * self.Y + self.y_of[k, l])
            self.child.append(child)
            self.child_weights.append(cw)
            keys = new_keys
            parent = np.array(new_parent, dtype=np.int64)
            flows = np.array(new_flows, dtype=np.int64)

        self.n_x = [len(k) for k in self.keys]
        self._index = [{key: a for a, key in enumerate(ks)} for ks in self.keys]
        self._float_cache: dict[str, object] = {}

    # -- navigation -----------------------------------------------------

    def x_nodes(self) -> Iterator[NodeKey]:
        for ks in self.keys:
            yield from ks

    def v_nodes(self) -> Iterator[NodeKey]:
        yield NodeKey()
        for t in range(self.T):
            for key in self.keys[t]:
                for k in range(self.K):
                    for l in range(self.L):
                        yield NodeKey(key.cells, key.trades + (k,), key.noise + (l,))

    def z_nodes(self) -> Iterator[NodeKey]:
        for ks in self.keys:
            for key in ks:
                for k in range(self.K):
                    yield NodeKey(key.cells, key.trades + (k,), key.noise)

    def outcomes(self) -> Iterator[Outcome]:
        T, K, L = self.T, self.K, self.L
        for i in range(self.N):
            for xs in itertools.product(range(K), repeat=T):
                for zs in itertools.product(range(L), repeat=T):
                    yield Outcome(i, xs, zs)

    def counts(self) -> dict:
        n_v = 1 + sum(self.n_x[t] * self.K * self.L for t in range(self.T))
        return {
            "V": n_v,
            "X": sum(self.n_x),
            "Z": sum(self.n_x) * self.K,
            "terminal": self.spec.n_outcomes,
        }

    def classify(self, key: NodeKey) -> str:
        """Node class in {"V", "X", "Z", "terminal"}."""
        if len(key.cells) == self.T + 1:
            return "terminal"
        return key.node_class

    def x_index(self, key: NodeKey) -> tuple[int, int]:
        """(round, position) of an X-node."""
        t = len(key.cells) - 1
        if t < 0 or t >= self.T or key not in self._index[t]:
            raise DomainError(f"{key} is not an insider decision node")
        return t, self._index[t][key]

    def node_of_state(self, t: int, state: int, trades, noise) -> NodeKey:
        cells = tuple(self.state_cell[s][state] for s in range(t + 1))
        return NodeKey(cells, tuple(trades[:t]), tuple(noise[:t]))

    def outcome_path(self, outcome: Outcome) -> list[tuple[int, int]]:
        """X-node (round, position) pairs visited by an outcome."""
        if not 0 <= outcome.state < self.N:
            raise DomainError(f"state {outcome.state} is not in the game")
        if len(outcome.trades) != self.T or len(outcome.noise) != self.T:
            raise DomainError("outcome length does not match the horizon")
        if any(not 0 <= k < self.K for k in outcome.trades) or any(
            not 0 <= l < self.L for l in outcome.noise
        ):
            raise DomainError("outcome uses a trade or noise index off the grid")
        return [
            self.x_index(self.node_of_state(t, outcome.state, outcome.trades, outcome.noise))
            for t in range(self.T)
        ]

    # -- flows ------------------------------------------------------------

    def flow_index(self, flow) -> tuple[int, int]:
        """(length-1, index) of a flow history given by values."""
        flow = tuple(as_fraction(y) for y in flow)
        if not 1 <= len(flow) <= self.T:
            raise DomainError(f"flow history of length {len(flow)} outside 1..{self.T}")
        idx = 0
        for y in flow:
            try:
                j = self.flow_values.index(y)
            except ValueError:
                raise DomainError(f"{y} is not an attainable order flow") from None
            idx = idx * self.Y + j
        return len(flow) - 1, idx

    def flow_tuple(self, t: int, idx: int) -> tuple:
        digits = []
        for _ in range(t + 1):
            idx, j = divmod(idx, self.Y)
            digits.append(self.flow_values[j])
        return tuple(reversed(digits))

    def n_flows(self, t: int) -> int:
        return self.Y ** (t + 1)

    # -- float copies for the solver -------------------------------------

    def floats(self) -> "FloatTables":
        tables = self._float_cache.get("tables")
        if tables is None:
            tables = FloatTables(self)
            self._float_cache["tables"] = tables
        return tables


class FloatTables:
    """Float64 views of the exact tables, built on first use."""

    def __init__(self, tree: GameTree):
        f = lambda a: np.asarray(a, dtype=float)  # noqa: E731
        self.noise_kernel = f(tree.noise_kernel)
        self.trade_values = f(tree.trade_values)
        self.noise_probs = f(tree.noise_probs)
        self.state_values = f(tree.state_values)
        self.prior = f(tree.prior)
        self.weights = [f(w) for w in tree.weights]
        self.child_weights = [f(w) for w in tree.child_weights]


@functools.lru_cache(maxsize=64)
def build_tree(spec: GameSpec, outcome_cap: int = DEFAULT_OUTCOME_CAP) -> GameTree:
    return GameTree(spec, outcome_cap)


def tree_of(game) -> GameTree:
    if isinstance(game, GameTree):
        return game
    if isinstance(game, GameSpec):
        return build_tree(game)
    raise TypeError(f"expected GameSpec or GameTree, got {type(game).__name__}")


# ---------------------------------------------------------------------------
# strategies


class BehaviourStrategy:
    """Probability vector over trades at every X-node.

    ``probs[t]`` has shape ``(n_x[t], K)``.  Entries are Fractions (object
    arrays) for exact work or floats for the solver.
    """

    def __init__(self, tree: GameTree, probs: Sequence[np.ndarray], check: bool = True):
        self.tree = tree
        self.probs = [np.asarray(p) for p in probs]
        if check:
            self._validate()

    def _validate(self):
        tree = self.tree
        if len(self.probs) != tree.T:
            raise DomainError("strategy has the wrong number of rounds")
        for t, p in enumerate(self.probs):
            if p.shape != (tree.n_x[t], tree.K):
                raise DomainError(
                    f"round {t + 1}: strategy table has shape {p.shape}, "
                    f"expected {(tree.n_x[t], tree.K)}"
                )
            if p.dtype == object:
                if any(v < 0 or v > 1 for v in p.flat):
                    raise DomainError("strategy entries must lie in [0, 1]")
                bad = [a for a in range(p.shape[0]) if sum(p[a]) != 1]
                if bad:
                    raise DomainError(
                        f"strategy at {tree.keys[t][bad[0]]} does not sum to 1"
                    )
            else:
                if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
                    raise DomainError("strategy entries must lie in [0, 1]")
                if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
                    raise DomainError("strategy rows must sum to 1")

    @property
    def exact(self) -> bool:
        return all(p.dtype == object for p in self.probs)

    @property
    def table(self) -> dict:
        return {
            key: tuple(self.probs[t][a])
            for t, ks in enumerate(self.tree.keys)
            for a, key in enumerate(ks)
        }

    def at(self, key: NodeKey) -> tuple:
        t, a = self.tree.x_index(key)
        return tuple(self.probs[t][a])

    def copy(self) -> "BehaviourStrategy":
        return BehaviourStrategy(self.tree, [p.copy() for p in self.probs], check=False)

    def as_float(self) -> "BehaviourStrategy":
        return BehaviourStrategy(
            self.tree, [np.asarray(p, dtype=float) for p in self.probs], check=False
        )

    def with_node(self, key: NodeKey, vector) -> "BehaviourStrategy":
        out = self.copy()
        t, a = self.tree.x_index(key)
        row = out.probs[t]
        if row.dtype != object and any(isinstance(v, Fraction) for v in vector):
            out.probs[t] = row = row.astype(object)
        row[a] = list(vector)
        return out

    def is_completely_mixed(self) -> bool:
        return all(bool(np.all(p > 0)) for p in self.probs)

    def max_diff(self, other: "BehaviourStrategy") -> float:
        return max(
            float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))
            for a, b in zip(self.probs, other.probs)
        )


def uniform_strategy(game, exact: bool = True) -> BehaviourStrategy:
    tree = tree_of(game)
    if exact:
        probs = [np.full((n, tree.K), Fraction(1, tree.K), dtype=object) for n in tree.n_x]
    else:
        probs = [np.full((n, tree.K), 1.0 / tree.K) for n in tree.n_x]
    return BehaviourStrategy(tree, probs)


def strategy_from_rule(game, rule) -> BehaviourStrategy:
    """Exact strategy from ``rule(key, tree) -> vector`` or a pure trade index."""
    tree = tree_of(game)
    probs = []
    for t, ks in enumerate(tree.keys):
        table = np.zeros((len(ks), tree.K), dtype=object)
        for a, key in enumerate(ks):
            choice = rule(key, tree)
            if isinstance(choice, (int, np.integer)):
                row = [Fraction(0)] * tree.K
                row[int(choice)] = Fraction(1)
            else:
                row = [as_fraction(p) for p in choice]
            table[a] = row
        probs.append(table)
    return BehaviourStrategy(tree, probs)


def pure_strategy(game, choices) -> BehaviourStrategy:
    """Pure strategy from a flat sequence of trade indices, X-nodes in tree order."""
    tree = tree_of(game)
    choices = list(choices)
    if len(choices) != sum(tree.n_x):
        raise DomainError(f"need {sum(tree.n_x)} choices, got {len(choices)}")
    probs, pos = [], 0
    for n in tree.n_x:
        table = np.zeros((n, tree.K), dtype=object)
        table[np.arange(n), choices[pos:pos + n]] = Fraction(1)
        probs.append(table)
        pos += n
    return BehaviourStrategy(tree, probs, check=False)


# ---------------------------------------------------------------------------
# probabilities and utilities


def realisation_prob(game, strategy: BehaviourStrategy, outcome: Outcome):
    """p^xi(omega): prior times the trade and noise probabilities along the path."""
    tree = tree_of(game)
    path = tree.outcome_path(outcome)
    p = tree.prior[outcome.state]
    for (t, a), k, l in zip(path, outcome.trades, outcome.noise):
        p = p * strategy.probs[t][a, k] * tree.noise_probs[l]
    return p


def _start_position(tree: GameTree, start: NodeKey):
    cls = start.node_class
    if cls not in ("V", "X"):
        raise DomainError(f"subgames start at V- or X-nodes, not {cls}-nodes")
    if cls == "X":
        tree.x_index(start)
        return len(start.cells) - 1, start
    return len(start.noise), start


def _is_after(start: NodeKey, outcome: Outcome, tree: GameTree) -> bool:
    t = len(start.noise)
    if tuple(outcome.trades[:len(start.trades)]) != start.trades:
        return False
    if tuple(outcome.noise[:t]) != start.noise:
        return False
    cells = tuple(tree.state_cell[s][outcome.state] for s in range(len(start.cells)))
    return cells == start.cells


def subgame_realisation_prob(game, strategy, start: NodeKey, outcome: Outcome):
    """Realisation probability conditional on starting at ``start``."""
    tree = tree_of(game)
    first, start = _start_position(tree, start)
    if not _is_after(start, outcome, tree):
        raise DomainError(f"{outcome} does not lie after {start}")
    path = tree.outcome_path(outcome)
    i = outcome.state
    if len(start.cells) == 0:
        p = tree.prior[i]
    else:
        s = len(start.cells) - 1
        p = tree.prior[i] / tree.cell_mass[s][start.cells[-1]]
    for s in range(first, tree.T):
        t, a = path[s]
        p = p * strategy.probs[t][a, outcome.trades[s]] * tree.noise_probs[outcome.noise[s]]
    return p


def outcome_flows(tree: GameTree, outcome: Outcome) -> tuple:
    return tuple(
        tree.spec.trades[k] + tree.spec.noise_support[l]
        for k, l in zip(outcome.trades, outcome.noise)
    )


def payoff(game, outcome: Outcome, prices) -> Fraction:
    """U(omega, S) = sum_t (v - S_t(y_1..y_t)) x_t."""
    from .pricing import as_pricing

    tree = tree_of(game)
    prices = as_pricing(tree, prices)
    tree.outcome_path(outcome)
    v = tree.spec.values[outcome.state]
    flows = outcome_flows(tree, outcome)
    total = Fraction(0)
    for t, k in enumerate(outcome.trades):
        x = tree.spec.trades[k]
        if x == 0:
            continue
        total += (v - prices[flows[: t + 1]]) * x
    return total


def start_reach(tree: GameTree, start: NodeKey | None, exact: bool):
    """(first round, reach weights at that round) for a subgame start node."""
    dtype = object if exact else float
    prior = tree.prior if exact else tree.floats().prior
    if start is None or (start.node_class == "V" and start.period == 0):
        return 0, np.where(tree.member[0], prior[None, :], 0).astype(dtype)
    weights = tree.weights if exact else tree.floats().weights
    cls = start.node_class
    if cls == "X":
        t, a = tree.x_index(start)
        P = np.zeros((tree.n_x[t], tree.N), dtype=dtype)
        P[a] = weights[t][a]
        return t, P
    if cls != "V":
        raise DomainError(f"subgames start at V- or X-nodes, not {cls}-nodes")
    t = start.period
    if t >= tree.T:
        return tree.T, None
    _, a = tree.x_index(NodeKey(start.cells, start.trades[:-1], start.noise[:-1]))
    k, l = start.trades[-1], start.noise[-1]
    P = np.zeros((tree.n_x[t], tree.N), dtype=dtype)
    for child in tree.child[t - 1][a, k, l]:
        if child >= 0:
            P[child] = weights[t - 1][a] * tree.member[t][child]
    return t, P


def forward_pass(tree: GameTree, strategy: BehaviourStrategy, start: NodeKey | None = None):
    """Reach weights and joint state/flow probabilities.

    Returns ``(reach, joint)`` where ``reach[t][a, i]`` is the probability of
    arriving at X-node ``a`` of round ``t`` in state ``i`` and ``joint[t][f, i]``
    is p^xi_Y(i, flow f) for flows of length ``t+1``.  With ``start`` the
    probabilities are those of the subgame beginning there.
    """
    exact = strategy.exact
    if exact:
        M, zeta = tree.noise_kernel, tree.noise_probs
        dtype = object
    else:
        ft = tree.floats()
        M, zeta = ft.noise_kernel, ft.noise_probs
        dtype = float
    first, P = start_reach(tree, start, exact)
    reach, joint = [], []
    for t in range(tree.T):
        if t < first:
            reach.append(np.zeros((tree.n_x[t], tree.N), dtype=dtype))
            joint.append(np.zeros((tree.Y ** (t + 1), tree.N), dtype=dtype))
            continue
        xi = strategy.probs[t]
        reach.append(P)
        B = xi @ M  # (n, Y): probability of each flow increment
        contrib = P[:, :, None] * B[:, None, :]  # (n, N, Y)
        if exact:
            J = np.zeros((tree.Y ** t, tree.N, tree.Y), dtype=dtype)
            np.add.at(J, tree.flow[t], contrib)
        else:
            # one-hot grouping by flow prefix is much faster than add.at
            G = np.zeros((tree.Y ** t, tree.n_x[t]))
            G[tree.flow[t], np.arange(tree.n_x[t])] = 1.0
            J = (G @ contrib.reshape(tree.n_x[t], -1)).reshape(tree.Y ** t, tree.N, tree.Y)
        joint.append(J.transpose(0, 2, 1).reshape(tree.Y ** (t + 1), tree.N))
        if t < tree.T - 1:
            par = tree.parent[t + 1]
            a, k, l = par[:, 0], par[:, 1], par[:, 2]
            step = xi[a, k] * zeta[l]
            P = np.where(tree.member[t + 1], P[a] * step[:, None], 0).astype(dtype)
    return reach, joint


def backward_pass(tree: GameTree, strategy: BehaviourStrategy | None, prices,
                  optimal: bool = False):
    """Per-action continuation values at every X-node.

    ``prices`` is a list of per-round arrays over flow indices.  With
    ``optimal=False`` the continuation follows ``strategy``; with
    ``optimal=True`` it follows the best reply (value function).  Returns
    ``(Q, W)``: ``Q[t][a, k]`` is u_tau((xi_-tau, delta_x_k), S) and ``W[t][a]``
    the node value.
    """
    exact = prices_are_exact(prices) and (strategy is None or strategy.exact)
    if exact:
        M, zeta, xs = tree.noise_kernel, tree.noise_probs, tree.trade_values
        weights, cws, vals = tree.weights, tree.child_weights, tree.state_values
    else:
        ft = tree.floats()
        M, zeta, xs = ft.noise_kernel, ft.noise_probs, ft.trade_values
        weights, cws, vals = ft.weights, ft.child_weights, ft.state_values
        prices = [np.asarray(p, dtype=float) for p in prices]
    Q: list = [None] * tree.T
    W: list = [None] * tree.T
    for t in range(tree.T - 1, -1, -1):
        rows = prices[t].reshape(tree.Y ** t, tree.Y)[tree.flow[t]]  # (n, Y)
        avg_price = rows @ M.T  # (n, K)
        vbar = weights[t] @ vals
        q = xs[None, :] * (vbar[:, None] - avg_price)
        if t < tree.T - 1:
            nxt = np.concatenate([W[t + 1], np.zeros(1, dtype=W[t + 1].dtype)])
            cont = (nxt[tree.child[t]] * cws[t][:, None, None, :]).sum(axis=-1)  # (n, K, L)
            q = q + cont @ zeta
        Q[t] = q
        if optimal:
            W[t] = q.max(axis=1)
        else:
            W[t] = (strategy.probs[t] * q).sum(axis=1)
    return Q, W


def prices_are_exact(prices) -> bool:
    return all(np.asarray(p).dtype == object for p in prices)


def root_value(tree: GameTree, W0):
    """Aggregate round-one node values into the root value."""
    masses = [tree.cell_mass[0][c] for c in tree.cell[0]]
    if np.asarray(W0).dtype != object:
        masses = [float(m) for m in masses]
    total = 0
    for m, w in zip(masses, W0):
        total = total + m * w
    return total


def expected_utility(game, strategy: BehaviourStrategy, prices):
    """u(xi, S) by backward recursion over the tree."""
    from .pricing import price_arrays_for_utility

    tree = tree_of(game)
    arrays = price_arrays_for_utility(tree, strategy, prices)
    _, W = backward_pass(tree, strategy, arrays)
    return root_value(tree, W[0])


def subgame_utility(game, strategy: BehaviourStrategy, prices, start: NodeKey):
    """u_tau(xi, S) for a V-node or X-node ``start``.

    Includes the payoff of rounds already traded before ``start``, valued at
    the conditional expectation of the true value given the insider's cell.
    """
    from .pricing import as_pricing, price_arrays_for_utility

    tree = tree_of(game)
    arrays = price_arrays_for_utility(tree, strategy, prices, start=start)
    _, W = backward_pass(tree, strategy, arrays)
    return past_payoff(tree, start, as_pricing(tree, prices)) + node_value(tree, W, start)


def past_payoff(tree: GameTree, start: NodeKey, prices):
    if not start.trades:
        return Fraction(0)
    s = len(start.cells) - 1
    cell = tree.spec.partitions[s][start.cells[-1]]
    vbar = sum((tree.spec.prior[i] * tree.spec.values[i] for i in cell), Fraction(0))
    vbar /= tree.cell_mass[s][start.cells[-1]]
    total = Fraction(0)
    flows = []
    for k, l in zip(start.trades, start.noise):
        x = tree.spec.trades[k]
        flows.append(x + tree.spec.noise_support[l])
        if x != 0:
            total += (vbar - prices[tuple(flows)]) * x
    return total


def node_value(tree: GameTree, W, start: NodeKey):
    """Future value at a V- or X-node from per-round X-node values."""
    cls = start.node_class
    if cls == "X":
        t, a = tree.x_index(start)
        return W[t][a]
    if cls != "V":
        raise DomainError(f"subgames start at V- or X-nodes, not {cls}-nodes")
    if start.period == 0:
        return root_value(tree, W[0])
    if start.period == tree.T:
        return 0
    t = start.period - 1
    parent = NodeKey(start.cells, start.trades[:-1], start.noise[:-1])
    _, a = tree.x_index(parent)
    k, l = start.trades[-1], start.noise[-1]
    exact = np.asarray(W[t + 1]).dtype == object
    total = 0
    for j, child in enumerate(tree.child[t][a, k, l]):
        if child >= 0:
            w = tree.child_weights[t][a, j]
            total = total + (w if exact else float(w)) * W[t + 1][child]
    return total
