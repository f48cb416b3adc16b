from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import exact_strategies, small_specs
from kylegames import (
    BeliefSystem,
    GameSpec,
    build_tree,
    expected_utility,
    rational_prices,
    uniform_strategy,
)
from kylegames.examples import random_spec, symmetric_two_state
from kylegames.game import backward_pass
from kylegames.pricing import beliefs_from_strategy
from kylegames.solver import (
    REFERENCE_POLY_EPS_1_8,
    EpsilonRangeError,
    SolverConfig,
    best_reply_eps,
    default_schedule,
    fixed_point_eps,
    indifference_root,
    poly_relative_value,
    profit_curve,
    profit_pair,
    sequential_equilibrium,
    support_enumeration_single_period,
    xi_alpha,
)
from kylegames.verify import pure_scan, verify_kyle
from test_game import diag_31

ALPHA_STAR = 0.7746420901


def price_beliefs(spec, price_of):
    """Beliefs on the top and bottom states that induce the given prices."""
    tree = build_tree(spec)
    lo, hi = spec.values[-1], spec.values[0]
    probs = []
    for t in range(tree.T):
        P = np.zeros((tree.n_flows(t), tree.N), dtype=object)
        P[:] = Fraction(0)
        for i in range(tree.n_flows(t)):
            w = (Fraction(price_of(tree.flow_tuple(t, i))) - lo) / (hi - lo)
            P[i, 0], P[i, -1] = w, 1 - w
        probs.append(P)
    return BeliefSystem(tree, probs)


# --- configuration ---------------------------------------------------------


def test_default_schedule():
    sched = default_schedule(3)
    assert sched[0] == pytest.approx(1 / 6)
    assert sched[1] == 1 / 8 and sched[-1] == 2.0 ** -22
    assert all(b < a for a, b in zip(sched, sched[1:]))
    assert all(e * 3 < 1 for e in sched)


@pytest.mark.parametrize("kwargs", [
    dict(damping=0), dict(damping=1.5), dict(fixed_point_tol=0), dict(mode="magic"),
    dict(epsilon_schedule=(0.1, 0.2)), dict(epsilon_schedule=(0.1, -0.1)),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_schedule_out_of_range():
    cfg = SolverConfig(epsilon_schedule=(0.4, 0.1))
    with pytest.raises(EpsilonRangeError):
        cfg.schedule_for(3)


# --- purified best replies -------------------------------------------------


def test_best_reply_unique_optimum():
    # value 1 for sure: buying at price 0 is strictly best
    spec = GameSpec.full_information((1, 0), (Fraction(1, 2),) * 2, (0,), (1,), (-1, 0, 1))
    mu = price_beliefs(spec, lambda flow: 0)
    xi = uniform_strategy(spec)
    key = build_tree(spec).keys[0][0]
    assert best_reply_eps(spec, xi, mu, key, Fraction(1, 100)) == (
        Fraction(1, 100), Fraction(1, 100), Fraction(98, 100))


def test_best_reply_all_equal():
    spec = GameSpec.full_information((1,), (1,), (0,), (1,), (-1, 0, 1))
    tree = build_tree(spec)
    mu = BeliefSystem(tree, [np.array([[Fraction(1)]] * tree.n_flows(0), dtype=object)])
    out = best_reply_eps(spec, uniform_strategy(spec), mu, tree.keys[0][0], Fraction(1, 100))
    assert out == (Fraction(1, 3),) * 3


def test_best_reply_example_3_1_middle(ex31):
    expected = {-2: 0, -1: Fraction(3, 7), 0: Fraction(13, 16), 1: Fraction(3, 4), 2: 1}
    mu = price_beliefs(ex31, lambda flow: expected[flow[0]])
    key = build_tree(ex31).keys[0][1]
    out = best_reply_eps(ex31, diag_31(ex31), mu, key, Fraction(1, 100))
    assert out == (Fraction(1, 100), Fraction(98, 100), Fraction(1, 100))


def test_best_reply_eps_range(ex31):
    mu = price_beliefs(ex31, lambda flow: Fraction(1, 2))
    with pytest.raises(EpsilonRangeError):
        best_reply_eps(ex31, diag_31(ex31), mu, build_tree(ex31).keys[0][0], Fraction(1, 3))


@given(st.data())
def test_best_reply_in_eps_simplex(data):
    spec = data.draw(small_specs())
    tree = build_tree(spec)
    xi = data.draw(exact_strategies(spec, completely_mixed=True))
    mu = beliefs_from_strategy(spec, xi)
    eps = Fraction(1, data.draw(st.integers(tree.K + 1, 50)))
    t = data.draw(st.integers(0, tree.T - 1))
    key = tree.keys[t][data.draw(st.integers(0, tree.n_x[t] - 1))]
    out = best_reply_eps(spec, xi, mu, key, eps)
    assert sum(out) == 1 and min(out) >= eps


# --- perturbed fixed points ------------------------------------------------


def test_fixed_point_single_state():
    spec = GameSpec.full_information((1,), (1,), (-1, 1), (Fraction(1, 2),) * 2, (0, 1))
    res = fixed_point_eps(spec, 0.1)
    assert res.converged and res.iterations <= 1 and res.residual == 0


def test_fixed_point_example_3_1(ex31):
    res = fixed_point_eps(ex31, 1e-6)
    P = np.asarray(res.strategy.probs[0], dtype=float)
    target = np.eye(3)[[2, 1, 0]]
    assert np.max(np.abs(P - target)) <= 3e-6
    assert res.residual <= 1e-8


def test_fixed_point_example_2_1(ex21):
    res = fixed_point_eps(ex21, 1e-6)
    alpha = float(res.strategy.probs[0][0, 1])
    assert abs(alpha - 0.77464) <= 1e-3


@given(st.integers(0, 10**6))
def test_fixed_point_residual_certificate(seed):
    # the reported residual bounds every eps-simplex improvement (purification formula)
    spec = random_spec(np.random.default_rng(seed), max_horizon=1)
    tree = build_tree(spec)
    eps = 1 / (4 * tree.K)
    res = fixed_point_eps(spec, eps)
    prices = [P @ tree.floats().state_values for P in res.beliefs.as_float().probs]
    Q, _ = backward_pass(tree, res.strategy.as_float(), prices)
    for q, p in zip(Q, res.strategy.probs):
        best = eps * q.sum(axis=1) + (1 - tree.K * eps) * q.max(axis=1)
        achieved = (np.asarray(p, dtype=float) * q).sum(axis=1)
        assert np.all(best - achieved <= res.residual + 1e-12)


# --- homotopy ------------------------------------------------------------


def test_homotopy_example_3_1(ex31):
    cert = sequential_equilibrium(ex31)
    P = np.asarray(cert.strategy.probs[0], dtype=float)
    assert np.max(np.abs(P - np.eye(3)[[2, 1, 0]])) <= 1e-6
    expected = [0, 3 / 7, 13 / 16, 3 / 4, 1]
    got = [float(cert.prices[(y,)]) for y in (-2, -1, 0, 1, 2)]
    assert got == pytest.approx(expected, abs=1e-6)
    assert [Fraction(g).limit_denominator(100) for g in got] == [
        0, Fraction(3, 7), Fraction(13, 16), Fraction(3, 4), 1]
    assert verify_kyle(ex31, cert.strategy, cert.prices).passed


def test_homotopy_example_2_1(ex21):
    cert = sequential_equilibrium(ex21)
    alpha = float(cert.strategy.probs[0][0, 1])
    assert abs(alpha - ALPHA_STAR) <= 1e-4
    assert verify_kyle(ex21, cert.strategy, cert.prices).passed
    # S2(0,1) is the Bayes price of the mixed strategy, which is not 1/2
    bayes = rational_prices(ex21, xi_alpha(ex21, alpha))[(0, 1)]
    assert float(cert.prices[(0, 1)]) == pytest.approx(float(bayes), abs=1e-6)
    for lv in cert.trace[-3:]:
        tree = build_tree(ex21)
        t, i = tree.flow_index((0, 1))
        assert float(lv.beliefs[t][i] @ tree.floats().state_values) == pytest.approx(
            float(bayes), abs=1e-3)


def test_homotopy_single_state():
    spec = GameSpec.full_information((Fraction(1, 2),), (1,), (-1, 1), (Fraction(1, 2),) * 2,
                                     (-1, 0, 1))
    cert = sequential_equilibrium(spec)
    assert all(float(p) == 0.5 for _, p in cert.prices.items())
    assert expected_utility(spec, cert.strategy, cert.prices) == pytest.approx(0)


@pytest.mark.parametrize("seed", range(8))
def test_homotopy_no_worse_than_pure(seed):
    spec = random_spec(np.random.default_rng(1000 + seed), max_horizon=1)
    scan = pure_scan(spec)
    cert = sequential_equilibrium(spec)
    rep = verify_kyle(spec, cert.strategy, cert.prices)
    if scan.passing:
        assert rep.max_deviation_gain <= max(scan.min_gain, 1e-6)


# --- support enumeration ----------------------------------------------------


def test_support_enumeration_example_3_1(ex31):
    certs = support_enumeration_single_period(ex31)
    assert len(certs) == 1
    cert = certs[0]
    assert cert.strategy.exact
    assert [list(row) for row in cert.strategy.probs[0]] == [[0, 0, 1], [0, 1, 0], [1, 0, 0]]
    assert [cert.prices[(y,)] for y in (-2, -1, 0, 1, 2)] == [
        0, Fraction(3, 7), Fraction(13, 16), Fraction(3, 4), 1]
    homotopy = sequential_equilibrium(ex31)
    diff = np.max(np.abs(np.asarray(homotopy.strategy.probs[0], float)
                         - np.asarray(cert.strategy.probs[0], float)))
    assert diff <= 1e-4


def test_support_enumeration_symmetric():
    spec = symmetric_two_state()
    certs = support_enumeration_single_period(spec)
    assert certs
    mirrored = [c for c in certs
                if np.allclose(np.asarray(c.strategy.probs[0][0], float),
                               np.asarray(c.strategy.probs[0][1], float)[::-1], atol=1e-8)]
    assert mirrored
    for c in certs:
        assert verify_kyle(spec, c.strategy, c.prices).passed


def test_support_enumeration_needs_one_round(ex21):
    from kylegames import DomainError

    with pytest.raises(DomainError):
        support_enumeration_single_period(ex21)


# --- the one-parameter family ----------------------------------------------


def test_indifference_root(ex21):
    roots = indifference_root(ex21)
    assert len(roots) == 1
    assert abs(roots[0] - ALPHA_STAR) <= 1e-8
    assert poly_relative_value(roots[0], REFERENCE_POLY_EPS_1_8) < 1e-3


def test_profit_curve_endpoints(ex21):
    buy, wait = profit_pair(ex21, ALPHA_STAR)
    assert buy == pytest.approx(0.3350563687, abs=1e-6)
    assert wait == pytest.approx(0.3350563687, abs=1e-6)
    _, buy1, wait1 = profit_curve(ex21, [1.0])[0]
    assert wait1 > buy1
    _, buy0, wait0 = profit_curve(ex21, [0.0])[0]
    assert all(np.isfinite([buy0, wait0])) and 0 <= buy0 <= 2 and 0 <= wait0 <= 2


def test_profit_pair_matches_exact(ex21):
    # float evaluation against exact rational evaluation at a rational alpha
    alpha = Fraction(3, 4)
    S = rational_prices(ex21, xi_alpha(ex21, alpha))
    tree = build_tree(ex21)
    Q, _ = backward_pass(tree, None, S.filled(fill=Fraction(1)), optimal=True)
    buy, wait = profit_pair(ex21, 0.75)
    assert buy == pytest.approx(float(Q[0][0][1]), abs=1e-12)
    assert wait == pytest.approx(float(Q[0][0][0]), abs=1e-12)
