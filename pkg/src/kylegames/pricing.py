"""Order-flow probabilities, rational prices and belief systems."""

from __future__ import annotations

from fractions import Fraction
from typing import Iterator

import numpy as np

from .game import (
    BehaviourStrategy,
    DomainError,
    GameTree,
    IncompletePricingError,
    as_fraction,
    format_flow,
    forward_pass,
    tree_of,
)


class UnreachedFlowError(DomainError):
    """Bayes' rule is undefined at a flow history of probability zero."""

    def __init__(self, flow):
        self.flow = tuple(flow)
        super().__init__(f"order flow {format_flow(self.flow)} has probability zero")


class NotCompletelyMixed(ValueError):
    pass


class PricingSystem:
    """Prices S_t over order-flow histories.

    Stored as one array per round indexed by flow index, with a mask of the
    histories where a price is defined.  A *complete* system is defined on
    every history; a reached-only system is defined where the assumed
    strategy puts positive probability and raises elsewhere.
    """

    def __init__(self, tree: GameTree, prices, defined=None, check: bool = True):
        self.tree = tree
        self.prices = [np.asarray(p) for p in prices]
        if defined is None:
            defined = [np.ones(len(p), dtype=bool) for p in self.prices]
        self.defined = [np.asarray(d, dtype=bool) for d in defined]
        if check:
            self._validate()

    def _validate(self):
        tree = self.tree
        lo, hi = tree.spec.values[-1], tree.spec.values[0]
        for t, (p, d) in enumerate(zip(self.prices, self.defined)):
            if p.shape != (tree.n_flows(t),) or d.shape != p.shape:
                raise DomainError(f"round {t + 1}: price table has the wrong shape")
            vals = p[d]
            if p.dtype == object:
                bad = [v for v in vals if not lo <= v <= hi]
            else:
                slack = 1e-9 * max(1.0, float(hi - lo))
                bad = vals[(vals < float(lo) - slack) | (vals > float(hi) + slack)]
            if len(bad):
                raise DomainError(f"price {bad[0]} outside [{lo}, {hi}]")

    @property
    def complete(self) -> bool:
        return all(bool(d.all()) for d in self.defined)

    @property
    def exact(self) -> bool:
        return all(p.dtype == object for p in self.prices)

    def __getitem__(self, flow):
        t, idx = self.tree.flow_index(flow)
        if not self.defined[t][idx]:
            raise IncompletePricingError(self.tree.flow_tuple(t, idx))
        return self.prices[t][idx]

    def get(self, flow, default=None):
        try:
            return self[flow]
        except IncompletePricingError:
            return default

    def items(self) -> Iterator[tuple[tuple, object]]:
        for t, (p, d) in enumerate(zip(self.prices, self.defined)):
            for idx in np.flatnonzero(d):
                yield self.tree.flow_tuple(t, int(idx)), p[idx]

    def filled(self, fill=0) -> list:
        """Per-round arrays with ``fill`` at undefined histories."""
        out = []
        for p, d in zip(self.prices, self.defined):
            q = p.copy()
            q[~d] = fill
            out.append(q)
        return out

    def with_prices(self, updates: dict) -> "PricingSystem":
        prices = [p.copy() for p in self.prices]
        defined = [d.copy() for d in self.defined]
        for flow, value in updates.items():
            t, idx = self.tree.flow_index(flow)
            if prices[t].dtype == object:
                value = as_fraction(value)
            prices[t][idx] = value
            defined[t][idx] = True
        return PricingSystem(self.tree, prices, defined)

    def as_float(self) -> "PricingSystem":
        return PricingSystem(
            self.tree, [np.asarray(p, dtype=float) for p in self.filled()],
            [d.copy() for d in self.defined], check=False,
        )

    def max_abs_diff(self, other: "PricingSystem", where=None) -> float:
        worst = 0.0
        for t in range(self.tree.T):
            mask = self.defined[t] & other.defined[t]
            if where is not None:
                mask &= where[t]
            if mask.any():
                a = np.asarray(self.prices[t][mask], dtype=float)
                b = np.asarray(other.prices[t][mask], dtype=float)
                worst = max(worst, float(np.max(np.abs(a - b))))
        return worst


class BeliefSystem:
    """Distributions over states at every order-flow history.

    ``probs[t]`` has shape ``(|E_Y|**(t+1), N)``.
    """

    def __init__(self, tree: GameTree, probs, check: bool = True):
        self.tree = tree
        self.probs = [np.asarray(p) for p in probs]
        if check:
            for t, p in enumerate(self.probs):
                if p.shape != (tree.n_flows(t), tree.N):
                    raise DomainError(f"round {t + 1}: belief table has the wrong shape")
                if p.dtype == object:
                    if any(v < 0 for v in p.flat) or any(sum(row) != 1 for row in p):
                        raise DomainError("beliefs must be probability vectors")
                elif np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
                    raise DomainError("beliefs must be probability vectors")

    @property
    def exact(self) -> bool:
        return all(p.dtype == object for p in self.probs)

    def __getitem__(self, flow) -> tuple:
        t, idx = self.tree.flow_index(flow)
        return tuple(self.probs[t][idx])

    def as_float(self) -> "BeliefSystem":
        return BeliefSystem(self.tree, [np.asarray(p, dtype=float) for p in self.probs],
                            check=False)


def as_pricing(game, prices) -> PricingSystem:
    """Accept a PricingSystem, a ``{flow: price}`` mapping or per-round arrays."""
    tree = tree_of(game)
    if isinstance(prices, PricingSystem):
        return prices
    if isinstance(prices, dict):
        arrays = [np.zeros(tree.n_flows(t), dtype=object) for t in range(tree.T)]
        defined = [np.zeros(tree.n_flows(t), dtype=bool) for t in range(tree.T)]
        for flow, value in prices.items():
            if not isinstance(flow, tuple):
                flow = (flow,)
            t, idx = tree.flow_index(flow)
            arrays[t][idx] = as_fraction(value)
            defined[t][idx] = True
        return PricingSystem(tree, arrays, defined)
    return PricingSystem(tree, list(prices))


# ---------------------------------------------------------------------------


def joint_flow_table(game, strategy: BehaviourStrategy):
    """joint[t][f, i] = p^xi_Y(i, flow f) for every round."""
    return forward_pass(tree_of(game), strategy)[1]


def joint_flow_prob(game, strategy: BehaviourStrategy, state: int, flow):
    """p^xi_Y(i, y_1..y_t); zero for flows containing unattainable values."""
    tree = tree_of(game)
    try:
        t, idx = tree.flow_index(flow)
    except DomainError:
        if flow and 1 <= len(flow) <= tree.T:
            return Fraction(0) if strategy.exact else 0.0
        raise
    if not 0 <= state < tree.N:
        raise DomainError(f"state {state} is not in the game")
    return joint_flow_table(tree, strategy)[t][idx, state]


def flow_prob(game, strategy: BehaviourStrategy, flow):
    tree = tree_of(game)
    t, idx = tree.flow_index(flow)
    return joint_flow_table(tree, strategy)[t][idx].sum()


def conditional_state_prob(game, strategy: BehaviourStrategy, flow) -> tuple:
    """Bayes posterior over states given the flow history."""
    tree = tree_of(game)
    t, idx = tree.flow_index(flow)
    row = joint_flow_table(tree, strategy)[t][idx]
    total = row.sum()
    if total == 0:
        raise UnreachedFlowError(tree.flow_tuple(t, idx))
    return tuple(p / total for p in row)


def _bayes(tree: GameTree, joint, exact: bool):
    """Posterior tables plus reached masks; unreached rows left at zero."""
    post, reached = [], []
    for J in joint:
        total = J.sum(axis=1)
        mask = total > 0
        P = np.zeros_like(J)
        if exact:
            for idx in np.flatnonzero(mask):
                P[idx] = J[idx] / total[idx]
        else:
            P[mask] = J[mask] / total[mask, None]
        post.append(P)
        reached.append(np.asarray(mask, dtype=bool))
    return post, reached


def reached_flows(game, strategy: BehaviourStrategy) -> list:
    """Per-round boolean masks of flows with positive probability."""
    joint = joint_flow_table(game, strategy)
    return [np.asarray(J.sum(axis=1) > 0, dtype=bool) for J in joint]


def rational_prices(game, strategy: BehaviourStrategy) -> PricingSystem:
    """Bayes-rational prices on the flows the strategy reaches."""
    tree = tree_of(game)
    joint = joint_flow_table(tree, strategy)
    post, reached = _bayes(tree, joint, strategy.exact)
    vals = tree.state_values if strategy.exact else tree.floats().state_values
    prices = []
    for P, mask in zip(post, reached):
        S = P @ vals
        if strategy.exact:
            S = np.asarray(S, dtype=object)
        S[~mask] = 0 if strategy.exact else 0.0
        prices.append(S)
    return PricingSystem(tree, prices, reached, check=False)


def beliefs_from_strategy(game, strategy: BehaviourStrategy) -> BeliefSystem:
    """Bayes beliefs of a completely mixed strategy, defined at every flow."""
    tree = tree_of(game)
    if not strategy.is_completely_mixed():
        raise NotCompletelyMixed(
            "beliefs_from_strategy needs a completely mixed strategy "
            "(every trade with positive probability at every node)"
        )
    joint = joint_flow_table(tree, strategy)
    post, reached = _bayes(tree, joint, strategy.exact)
    # every flow is reached under a completely mixed strategy
    assert all(m.all() for m in reached)
    return BeliefSystem(tree, post, check=False)


def price_from_beliefs(game, beliefs: BeliefSystem) -> PricingSystem:
    """S^mu_t(flow) = sum_i mu_t(i | flow) v^i on every flow."""
    tree = tree_of(game)
    vals = tree.state_values if beliefs.exact else tree.floats().state_values
    prices = [np.asarray(P @ vals, dtype=object if beliefs.exact else float)
              for P in beliefs.probs]
    return PricingSystem(tree, prices, check=False)


def point_beliefs(game, state: int) -> BeliefSystem:
    tree = tree_of(game)
    probs = []
    for t in range(tree.T):
        P = np.zeros((tree.n_flows(t), tree.N), dtype=object)
        P[:, state] = Fraction(1)
        probs.append(P)
    return BeliefSystem(tree, probs)


def price_arrays_for_utility(tree: GameTree, strategy: BehaviourStrategy, prices,
                             start=None) -> list:
    """Price arrays for utility evaluation, filling unreached gaps with zero.

    Raises IncompletePricingError if a history with positive probability
    (under ``strategy``, from ``start``) has no price.
    """
    pricing = as_pricing(tree, prices)
    if pricing.complete:
        return pricing.filled()
    joint = forward_pass(tree, strategy, start=start)[1]
    for t, (J, d) in enumerate(zip(joint, pricing.defined)):
        missing = np.flatnonzero((J.sum(axis=1) > 0) & ~d)
        if len(missing):
            raise IncompletePricingError(tree.flow_tuple(t, int(missing[0])))
    return pricing.filled()
