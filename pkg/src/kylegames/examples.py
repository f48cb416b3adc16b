"""Built-in games used as reproduction targets and in tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .game import GameSpec, as_fraction


def example_2_1(noise_eps="1/8") -> GameSpec:
    """Two rounds, value 0 or 1 revealed at once, insider may buy one unit or wait.

    Noise is -1, 0, +1 with probabilities eps, 1-2eps, eps.
    """
    eps = as_fraction(noise_eps)
    if not 0 < eps < Fraction(1, 2):
        raise ValueError(f"noise eps must lie in (0, 1/2), got {eps}")
    return GameSpec.full_information(
        values=(1, 0),
        prior=(Fraction(1, 2), Fraction(1, 2)),
        noise_support=(-1, 0, 1),
        noise_probs=(eps, 1 - 2 * eps, eps),
        trades=(0, 1),
        horizon=2,
    )


def example_3_1() -> GameSpec:
    """One round, three values, bearish noise; the unique equilibrium has
    a price that falls between flows 0 and 1."""
    return GameSpec.full_information(
        values=(1, Fraction(1, 2), 0),
        prior=(Fraction(1, 3),) * 3,
        noise_support=(-1, 0, 1),
        noise_probs=(Fraction(6, 8), Fraction(1, 8), Fraction(1, 8)),
        trades=(-1, 0, 1),
    )


def theorem_example(n: int = 2) -> GameSpec:
    """Values and noise both +-1 with equal odds; even trades up to +-2n."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    return GameSpec.full_information(
        values=(1, -1),
        prior=(Fraction(1, 2), Fraction(1, 2)),
        noise_support=(-1, 1),
        noise_probs=(Fraction(1, 2), Fraction(1, 2)),
        trades=tuple(range(-2 * n, 2 * n + 1, 2)),
    )


def symmetric_two_state() -> GameSpec:
    """v in {0, 1}, uniform noise and trades on {-1, 0, 1}."""
    third = Fraction(1, 3)
    return GameSpec.full_information(
        values=(1, 0),
        prior=(Fraction(1, 2), Fraction(1, 2)),
        noise_support=(-1, 0, 1),
        noise_probs=(third, third, third),
        trades=(-1, 0, 1),
    )


def _random_simplex(rng: np.random.Generator, n: int, denom: int = 12) -> tuple:
    """Strictly positive rational weights summing to one."""
    w = rng.integers(1, denom + 1, size=n)
    total = int(w.sum())
    return tuple(Fraction(int(x), total) for x in w)


def _random_partition(rng, states) -> list:
    labels = rng.integers(0, len(states), size=len(states))
    cells = {}
    for s, lab in zip(states, labels):
        cells.setdefault(int(lab), []).append(s)
    return [tuple(c) for c in cells.values()]


def random_spec(rng: np.random.Generator, max_horizon: int = 2, max_states: int = 3,
                max_trades: int = 3, max_noise: int = 3) -> GameSpec:
    """Small game with rational values, priors and noise, integer trades and noise.

    Trades always include zero.  In two-round games the first partition is
    random and the second refines it at random.
    """
    T = int(rng.integers(1, max_horizon + 1))
    N = int(rng.integers(1, max_states + 1))
    values = sorted({Fraction(int(v), 4) for v in rng.integers(0, 5, size=N)}, reverse=True)
    N = len(values)
    K = int(rng.integers(2, max_trades + 1))
    others = rng.choice([x for x in range(-2, 3) if x != 0], size=K - 1, replace=False)
    trades = tuple(sorted([0, *map(int, others)]))
    L = int(rng.integers(1, max_noise + 1))
    noise = tuple(sorted(map(int, rng.choice(np.arange(-1, 2), size=L, replace=False))))
    first = _random_partition(rng, list(range(N)))
    parts = [first]
    for _ in range(1, T):
        parts.append([c for cell in parts[-1] for c in _random_partition(rng, list(cell))])
    return GameSpec(T, tuple(values), tuple(tuple(p) for p in parts), _random_simplex(rng, N),
                    noise, _random_simplex(rng, L), trades)


BUILTINS = {
    "example-2-1": example_2_1,
    "example-3-1": example_3_1,
    "theorem-3-example": theorem_example,
    "symmetric-two-state": symmetric_two_state,
}
