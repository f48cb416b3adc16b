import os
import sys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@st.composite
def small_specs(draw, max_horizon=2, max_states=3, max_trades=3, max_noise=3):
    from kylegames.examples import random_spec

    seed = draw(st.integers(0, 2**32 - 1))
    return random_spec(np.random.default_rng(seed), max_horizon, max_states, max_trades,
                       max_noise)


@st.composite
def exact_strategies(draw, spec, completely_mixed=False):
    from kylegames import BehaviourStrategy, build_tree

    tree = build_tree(spec)
    lo = 1 if completely_mixed else 0
    probs = []
    for n in tree.n_x:
        rows = []
        for _ in range(n):
            w = draw(st.lists(st.integers(lo, 4), min_size=tree.K, max_size=tree.K)
                     .filter(lambda v: sum(v) > 0))
            rows.append([Fraction(x, sum(w)) for x in w])
        probs.append(np.array(rows, dtype=object).reshape(n, tree.K))
    return BehaviourStrategy(tree, probs)


@st.composite
def complete_prices(draw, spec):
    """Random complete rational prices in [v_N, v_1]."""
    from kylegames import build_tree
    from kylegames.pricing import PricingSystem

    tree = build_tree(spec)
    lo, hi = spec.values[-1], spec.values[0]
    arrays = []
    for t in range(tree.T):
        u = draw(st.lists(st.integers(0, 8), min_size=tree.n_flows(t),
                          max_size=tree.n_flows(t)))
        arrays.append(np.array([lo + (hi - lo) * Fraction(x, 8) for x in u], dtype=object))
    return PricingSystem(tree, arrays)


@pytest.fixture(scope="session")
def ex31():
    from kylegames.examples import example_3_1

    return example_3_1()


@pytest.fixture(scope="session")
def ex21():
    from kylegames.examples import example_2_1

    return example_2_1(Fraction(1, 8))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
