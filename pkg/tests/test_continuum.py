from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kylegames import DomainError, expected_utility, rational_prices
from kylegames.continuum import (
    CSV_COLUMNS,
    ContinuousGame,
    NoiseDensity,
    RefinementError,
    StepPriceFunction,
    StepYoungMeasure,
    ValueDistribution,
    approximate_strategy,
    cesaro_prices,
    convergence_report,
    discrete_utility,
    discretize,
    floor_error_gap,
    narrow_proxy,
    pricing_residuals,
    report_csv,
    solve_sequence,
    uniform_continuum,
)
from kylegames.verify import verify_kyle

H = Fraction(1, 2)


def point_game(v0):
    return ContinuousGame(ValueDistribution(atoms=((v0, 1),)),
                          NoiseDensity(0, (H, H)), -1, 1)


@st.composite
def continuous_games(draw):
    level = draw(st.integers(0, 2))
    w = draw(st.lists(st.integers(0, 4), min_size=2**level, max_size=2**level)
             .filter(lambda v: sum(v) > 0))
    dens = tuple(Fraction(x * 2**level, sum(w)) for x in w)
    atom = draw(st.sampled_from([None, Fraction(0), Fraction(1, 3), Fraction(1)]))
    if atom is None:
        nu = ValueDistribution(density_level=level, density=dens)
    else:
        nu = ValueDistribution(atoms=((atom, H),), density_level=level,
                               density=tuple(d * H for d in dens))
    g = draw(st.lists(st.integers(0, 3), min_size=4, max_size=4).filter(lambda v: sum(v) > 0))
    noise = NoiseDensity(1, tuple(Fraction(2 * x, sum(g)) for x in g))
    span = draw(st.integers(1, 2))
    return ContinuousGame(nu, noise, -span, span)


@st.composite
def step_pair(draw, level):
    """Random level-n step strategy and step price function."""
    g = level.game
    trades = level.trade_grid
    atoms = []
    for _ in range(2**level.n + 1):
        picks = draw(st.lists(st.sampled_from(trades), min_size=1, max_size=3))
        atoms.append({x: Fraction(picks.count(x), len(picks)) for x in set(picks)})
    cells = (g.y_hi - g.y_lo) * 2**level.n
    vals = draw(st.lists(st.integers(0, 8), min_size=cells, max_size=cells))
    lo, hi = level.spec.values[-1], level.spec.values[0]
    return StepYoungMeasure(level.n, atoms), StepPriceFunction(
        level.n, g.y_lo, tuple(lo + (hi - lo) * Fraction(v, 8) for v in vals))


# --- discretisation -------------------------------------------------------------


def test_uniform_noise_level_one():
    lv = discretize(uniform_continuum(), 1)
    assert lv.spec.noise_support == (-1, -H, 0, H)
    assert lv.spec.noise_probs == (Fraction(1, 4),) * 4


def test_uniform_value_level_one():
    lv = discretize(uniform_continuum(), 1)
    assert dict(zip(lv.spec.values, lv.spec.prior)) == {0: H, H: H}


def test_point_mass_at_one():
    lv = discretize(point_game(1), 3)
    assert lv.spec.values == (1,) and lv.spec.prior == (1,)


def test_refinement_errors():
    game = ContinuousGame(ValueDistribution(density=(1,)),
                          NoiseDensity(2, (Fraction(1, 2),) * 8), -1, 1)
    with pytest.raises(RefinementError):
        discretize(game, 1)
    with pytest.raises(DomainError):
        discretize(uniform_continuum(), 0)


def test_bad_densities():
    with pytest.raises(DomainError):
        NoiseDensity(0, (1, 1))
    with pytest.raises(DomainError):
        ValueDistribution(density=(Fraction(1, 2),))
    with pytest.raises(DomainError):
        ContinuousGame(ValueDistribution(density=(1,)), NoiseDensity(0, (H, H)), 0, 1)


@given(continuous_games(), st.integers(1, 3))
def test_mass_preserved(game, n):
    lv = discretize(game, n)
    assert sum(lv.spec.prior) == 1 and sum(lv.spec.noise_probs) == 1
    assert all(p > 0 for p in lv.spec.prior) and all(p > 0 for p in lv.spec.noise_probs)


# --- utilities --------------------------------------------------------------


def test_zero_strategy_utility():
    lv = discretize(uniform_continuum(), 2)
    zero = StepYoungMeasure(2, [{0: 1}] * 5)
    price = StepPriceFunction(2, -2, (Fraction(1, 3),) * 16)
    assert discrete_utility(lv, zero, price) == 0


def test_buy_one_at_half():
    lv = discretize(uniform_continuum(), 1)
    buy = StepYoungMeasure(1, [{1: 1}] * 3)
    price = StepPriceFunction(1, -2, (H,) * 8)
    assert discrete_utility(lv, buy, price) == Fraction(-1, 4)


@given(st.data())
def test_discrete_utility_matches_game_core(data):
    game = data.draw(continuous_games())
    lv = discretize(game, data.draw(st.integers(max(1, game.noise.level), 2)))
    s, p = data.draw(step_pair(lv))
    xi = lv.to_behaviour(s)
    assert discrete_utility(lv, s, p) == expected_utility(lv.spec, xi, lv.to_pricing(p))


@given(st.data())
def test_floor_error_bound(data):
    game = data.draw(continuous_games())
    lv = discretize(game, data.draw(st.integers(1, 3)))
    s, p = data.draw(step_pair(lv))
    gap, bound = floor_error_gap(lv, s, p)
    assert gap <= bound


# --- pricing identities --------------------------------------------------------


@given(st.data())
def test_bayes_step_prices_have_zero_residual(data):
    game = data.draw(continuous_games())
    lv = discretize(game, data.draw(st.integers(1, 2)))
    s, _ = data.draw(step_pair(lv))
    price = lv.price_step(rational_prices(lv.spec, lv.to_behaviour(s)))
    res = pricing_residuals(lv, s, price)
    assert set(res) == set(range(lv.n + 1))
    assert all(r == 0 for r in res.values())


def test_wrong_price_has_residual():
    lv = discretize(uniform_continuum(), 2)
    s = StepYoungMeasure(2, [{0: 1}] * 5)
    price = StepPriceFunction(2, -2, (Fraction(1, 3),) * 16)
    assert max(pricing_residuals(lv, s, price).values()) > 0


# --- approximants --------------------------------------------------------------


def _target():
    # level-1 target with a uniform piece on the middle cell and mixed atoms
    return StepYoungMeasure(1, [{Fraction(-1, 3): H, Fraction(2, 3): H}, {}, {1: 1}],
                            [[], [(Fraction(-1), Fraction(1), Fraction(1))], []])


def test_approximant_idempotent():
    nu = uniform_continuum().value_dist
    s = StepYoungMeasure(2, [{Fraction(1, 4): 1}, {0: 1}, {Fraction(-1, 2): H, 1: H},
                             {Fraction(3, 4): 1}, {1: 1}])
    out = approximate_strategy(s, 2, nu)
    # the point cell {1} carries no mass under the uniform law and trades zero
    assert out.atoms[:4] == s.atoms[:4] and out.atoms[4] == {0: 1}


def test_approximant_null_cells():
    nu = ValueDistribution(atoms=((Fraction(1, 8), H), (Fraction(7, 8), H)))
    out = approximate_strategy(StepYoungMeasure(0, [{1: 1}, {-1: 1}]), 2, nu)
    assert out.atoms[0] == {1: 1} and out.atoms[3] == {1: 1}
    assert out.atoms[1] == out.atoms[2] == out.atoms[4] == {0: 1}


def test_approximant_moments():
    nu = uniform_continuum().value_dist
    target = _target()
    for n in range(1, 6):
        approx = approximate_strategy(target, n, nu)
        for k in range(2):  # the point cell {1} is null under the uniform law
            for c in range(k * 2 ** (n - 1), (k + 1) * 2 ** (n - 1)):
                assert abs(approx.moment(c, 1) - target.moment(k, 1)) <= Fraction(1, 2**n)


def test_narrow_proxy_decreases():
    nu = uniform_continuum().value_dist
    target = _target()
    dist = [narrow_proxy(approximate_strategy(target, n, nu), target, nu, powers=(1,))
            for n in range(1, 7)]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert all(d <= 2.0 ** -n for n, d in zip(range(1, 7), dist))


# --- forward averages ----------------------------------------------------------


def test_cesaro_constant():
    s = StepPriceFunction(1, -2, (Fraction(1, 3),) * 8)
    res = cesaro_prices([s, s, s])
    assert res.tail_oscillation == 0 and res.increments == [0.0, 0.0]


def test_cesaro_rademacher():
    # S^n alternates 0, 1 on the cells of level n
    N = 6
    seq = [StepPriceFunction(n, 0, tuple(j % 2 for j in range(2**n))) for n in range(1, N + 1)]
    raw = cesaro_prices(seq, window=1)
    assert raw.tail_oscillation == 1
    avg = cesaro_prices(seq)
    # the full average of N independent fair bits has mean square deviation 1/(4N)
    assert np.mean((avg.averages[0] - 0.5) ** 2) == pytest.approx(1 / (4 * N))
    assert np.mean((raw.averages[0] - 0.5) ** 2) == pytest.approx(1 / 4)


def test_cesaro_needs_two():
    with pytest.raises(ValueError):
        cesaro_prices([StepPriceFunction(1, 0, (0, 1))])


# --- solved sequences ----------------------------------------------------------


@pytest.fixture(scope="module")
def uniform_sequence():
    return solve_sequence(uniform_continuum(), range(1, 5))


def test_sequence_levels_verify(uniform_sequence):
    sols, notices = uniform_sequence
    assert not notices and [s.level.n for s in sols] == [1, 2, 3, 4]
    for s in sols:
        assert verify_kyle(s.level.spec, s.certificate.strategy, s.certificate.prices,
                           tol=1e-6).passed


def test_report_columns(uniform_sequence):
    sols, _ = uniform_sequence
    rows = convergence_report(sols)
    assert all(r["pricing_residual"] == 0.0 for r in rows)
    text = report_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(text.splitlines()) == len(sols) + 1
    one = convergence_report(sols, window=1)
    assert [r["cesaro_utility"] for r in one] == [r["utility"] for r in one]
    assert [r["price_oscillation"] for r in one] != [r["price_oscillation"] for r in rows]


def test_point_mass_sequence():
    sols, _ = solve_sequence(point_game(Fraction(1, 3)), [1, 2])
    for s in sols:
        v = s.level.spec.values[0]
        assert v == Fraction((Fraction(1, 3) * 2**s.level.n).__floor__(), 2**s.level.n)
        assert {p for _, p in s.prices.items()} == {v}
        assert s.utility == 0


def test_empty_range():
    with pytest.raises(ValueError):
        solve_sequence(uniform_continuum(), [])
