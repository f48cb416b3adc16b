"""Discrete Kyle insider-trading games: trees, pricing, equilibria and checks."""

from .game import (
    BehaviourStrategy,
    DomainError,
    GameSpec,
    GameTree,
    IncompletePricingError,
    NodeKey,
    Outcome,
    SpecError,
    TreeTooLarge,
    build_tree,
    expected_utility,
    payoff,
    pure_strategy,
    realisation_prob,
    strategy_from_rule,
    subgame_realisation_prob,
    subgame_utility,
    uniform_strategy,
)
from .pricing import (
    BeliefSystem,
    PricingSystem,
    UnreachedFlowError,
    beliefs_from_strategy,
    conditional_state_prob,
    joint_flow_prob,
    price_from_beliefs,
    rational_prices,
)

__version__ = "0.1.0"
