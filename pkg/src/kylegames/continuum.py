"""Dyadic discretisation of the single-period continuous Kyle game.

Values live on [0, 1], noise on [-1, 1] with a piecewise-constant density and
trades on an integer interval.  Level n uses the grids k/2^n; strategies and
prices at level n are step objects that are constant between grid points.
All measures are exact rationals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .game import (
    BehaviourStrategy,
    DomainError,
    GameSpec,
    TreeTooLarge,
    as_fraction,
    build_tree,
)
from .pricing import PricingSystem, rational_prices


class RefinementError(DomainError):
    """The noise density is not constant on the cells of the requested grid."""


def _floor_grid(x: Fraction, n: int) -> Fraction:
    return Fraction((x * 2**n).__floor__(), 2**n)


@dataclass(frozen=True)
class ValueDistribution:
    """Probability on [0, 1]: point masses plus a density that is constant on
    the dyadic cells [k/2^m, (k+1)/2^m)."""

    atoms: tuple = ()
    density_level: int = 0
    density: tuple = ()

    def __post_init__(self):
        atoms = tuple(sorted((as_fraction(p), as_fraction(w)) for p, w in self.atoms))
        dens = tuple(as_fraction(d) for d in self.density)
        if dens and len(dens) != 2**self.density_level:
            raise DomainError(f"density needs {2**self.density_level} cells, got {len(dens)}")
        if any(not 0 <= p <= 1 for p, _ in atoms) or any(w < 0 for _, w in atoms):
            raise DomainError("atoms must be nonnegative masses on [0, 1]")
        if any(d < 0 for d in dens):
            raise DomainError("density must be nonnegative")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "density", dens)
        if self.total() != 1:
            raise DomainError(f"value distribution has total mass {self.total()}")

    def total(self) -> Fraction:
        return self.mass(Fraction(0), Fraction(1), closed=True)

    def mass(self, a: Fraction, b: Fraction, closed: bool = False) -> Fraction:
        """nu([a, b)) or nu([a, b]); point masses included."""
        return self._integral(a, b, closed, 0)

    def moment(self, a: Fraction, b: Fraction, closed: bool = False) -> Fraction:
        """Integral of v over [a, b) (or [a, b])."""
        return self._integral(a, b, closed, 1)

    def _integral(self, a, b, closed, power):
        total = Fraction(0)
        for p, w in self.atoms:
            if a <= p < b or (closed and p == b):
                total += w * p**power
        if self.density:
            h = Fraction(1, 2**self.density_level)
            for k, d in enumerate(self.density):
                lo, hi = max(a, k * h), min(b, (k + 1) * h)
                if d and hi > lo:
                    total += d * (hi ** (power + 1) - lo ** (power + 1)) / (power + 1)
        return total

    def cell_mass(self, n: int, k: int) -> Fraction:
        """Mass of the value cell D^n_k; k = 2^n is the point {1}."""
        h = Fraction(1, 2**n)
        if k == 2**n:
            return self.mass(Fraction(1), Fraction(1), closed=True)
        return self.mass(k * h, (k + 1) * h)

    def cell_moment(self, n: int, k: int) -> Fraction:
        h = Fraction(1, 2**n)
        if k == 2**n:
            return self.moment(Fraction(1), Fraction(1), closed=True)
        return self.moment(k * h, (k + 1) * h)


@dataclass(frozen=True)
class NoiseDensity:
    """Density on [-1, 1] that is constant on [j/2^m - 1, (j+1)/2^m - 1)."""

    level: int
    values: tuple

    def __post_init__(self):
        vals = tuple(as_fraction(v) for v in self.values)
        if len(vals) != 2 ** (self.level + 1):
            raise DomainError(f"noise density needs {2 ** (self.level + 1)} cells")
        if any(v < 0 for v in vals):
            raise DomainError("noise density must be nonnegative")
        if sum(vals) * Fraction(1, 2**self.level) != 1:
            raise DomainError("noise density must integrate to one")
        object.__setattr__(self, "values", vals)

    def breakpoints(self) -> list:
        h = Fraction(1, 2**self.level)
        return [-1 + j * h for j in range(len(self.values) + 1)]

    def mass(self, a: Fraction, b: Fraction) -> Fraction:
        h = Fraction(1, 2**self.level)
        total = Fraction(0)
        for j, g in enumerate(self.values):
            lo, hi = max(a, -1 + j * h), min(b, -1 + (j + 1) * h)
            if g and hi > lo:
                total += g * (hi - lo)
        return total


@dataclass(frozen=True)
class ContinuousGame:
    value_dist: ValueDistribution
    noise: NoiseDensity
    x_lo: int
    x_hi: int

    def __post_init__(self):
        if not (int(self.x_lo) == self.x_lo and int(self.x_hi) == self.x_hi):
            raise DomainError("trade interval endpoints must be integers")
        if not self.x_lo < 0 < self.x_hi:
            raise DomainError("trade interval must contain zero in its interior")

    @property
    def y_lo(self) -> int:
        return self.x_lo - 1

    @property
    def y_hi(self) -> int:
        return self.x_hi + 1


def uniform_continuum() -> ContinuousGame:
    """Uniform value on [0, 1], uniform noise on [-1, 1], trades in [-1, 1]."""
    return ContinuousGame(
        ValueDistribution(density_level=0, density=(1,)),
        NoiseDensity(0, (Fraction(1, 2), Fraction(1, 2))),
        -1, 1,
    )


# ---------------------------------------------------------------------------
# step objects


@dataclass(frozen=True)
class StepPriceFunction:
    """Price constant on [y_lo + j/2^n, y_lo + (j+1)/2^n); the last value also
    covers the right endpoint."""

    level: int
    y_lo: int
    values: tuple

    def __call__(self, y) -> Fraction:
        j = int(((as_fraction(y) - self.y_lo) * 2**self.level).__floor__())
        return self.values[min(max(j, 0), len(self.values) - 1)]

    def refine(self, n: int) -> np.ndarray:
        """Float cell values on the finer grid of level n."""
        if n < self.level:
            raise RefinementError("cannot refine to a coarser grid")
        return np.repeat(np.asarray(self.values, dtype=float), 2 ** (n - self.level))


@dataclass
class StepYoungMeasure:
    """Strategy constant on value cells D^m_k (k = 0..2^m, the last being {1}).

    Each cell holds point masses ``atoms[k] = {x: w}`` and uniform pieces
    ``uniform[k] = [(a, b, w), ...]`` on trade intervals.
    """

    level: int
    atoms: list
    uniform: list = field(default_factory=list)

    def __post_init__(self):
        size = 2**self.level + 1
        if not self.uniform:
            self.uniform = [[] for _ in range(size)]
        if len(self.atoms) != size or len(self.uniform) != size:
            raise DomainError(f"strategy at level {self.level} needs {size} value cells")
        self.atoms = [{as_fraction(x): as_fraction(w) for x, w in cell.items() if w}
                      for cell in self.atoms]
        self.uniform = [[(as_fraction(a), as_fraction(b), as_fraction(w)) for a, b, w in cell]
                        for cell in self.uniform]
        for k in range(size):
            total = sum(self.atoms[k].values(), Fraction(0)) + sum(
                (w for _, _, w in self.uniform[k]), Fraction(0))
            if total != 1:
                raise DomainError(f"value cell {k} has total weight {total}")

    @property
    def is_step(self) -> bool:
        return not any(self.uniform)

    def moment(self, k: int, power: int) -> Fraction:
        """Integral of x^power against the cell's trade distribution."""
        total = sum((w * x**power for x, w in self.atoms[k].items()), Fraction(0))
        for a, b, w in self.uniform[k]:
            total += w * (b ** (power + 1) - a ** (power + 1)) / ((power + 1) * (b - a))
        return total


# ---------------------------------------------------------------------------
# discretisation


@dataclass
class DiscretizationLevel:
    n: int
    game: ContinuousGame
    spec: GameSpec
    value_cells: tuple
    trade_grid: tuple
    noise_grid: tuple

    @property
    def tree(self):
        return build_tree(self.spec)

    def state_of_cell(self, k: int):
        try:
            return self.value_cells.index(k)
        except ValueError:
            return None

    def to_behaviour(self, strategy: StepYoungMeasure) -> BehaviourStrategy:
        if strategy.level != self.n or not strategy.is_step:
            raise DomainError(f"strategy must be a level-{self.n} step measure")
        pos = {x: i for i, x in enumerate(self.spec.trades)}
        rows = []
        for k in self.value_cells:
            row = np.array([Fraction(0)] * len(pos), dtype=object)
            for x, w in strategy.atoms[k].items():
                if x not in pos:
                    raise DomainError(f"trade {x} is not on the level-{self.n} grid")
                row[pos[x]] = w
            rows.append(row)
        return BehaviourStrategy(self.tree, [np.array(rows, dtype=object)])

    def to_step(self, strategy: BehaviourStrategy) -> StepYoungMeasure:
        """Embed a discrete strategy; value cells of zero mass get a zero trade."""
        P = strategy.probs[0]
        atoms = []
        for k in range(2**self.n + 1):
            i = self.state_of_cell(k)
            if i is None:
                atoms.append({Fraction(0): Fraction(1)})
            else:
                atoms.append({x: (w if strategy.exact else Fraction(float(w)))
                              for x, w in zip(self.spec.trades, P[i]) if w})
        return StepYoungMeasure(self.n, atoms)

    def price_step(self, pricing: PricingSystem, fill=None) -> StepPriceFunction:
        """Step price from a discrete pricing system; flows the discrete game
        cannot produce get ``fill`` (default: the mean value)."""
        g = self.game
        if fill is None:
            fill = sum(self.spec.prior[i] * self.spec.values[i] for i in range(self.spec.n_states))
        h = Fraction(1, 2**self.n)
        cells = (g.y_hi - g.y_lo) * 2**self.n
        flows = {y: i for i, y in enumerate(self.tree.flow_values)}
        vals = []
        for j in range(cells):
            y = g.y_lo + j * h
            if y in flows and pricing.defined[0][flows[y]]:
                vals.append(as_fraction(pricing.prices[0][flows[y]]))
            else:
                vals.append(as_fraction(fill))
        return StepPriceFunction(self.n, g.y_lo, tuple(vals))

    def to_pricing(self, price: StepPriceFunction) -> PricingSystem:
        arr = np.array([price(y) for y in self.tree.flow_values], dtype=object)
        return PricingSystem(self.tree, [arr])


def discretize(game: ContinuousGame, n: int) -> DiscretizationLevel:
    """Floor pushforward of the value law and cell masses of the noise law."""
    if n < 1:
        raise DomainError("grid exponent n must be at least 1")
    if n < game.noise.level:
        raise RefinementError(
            f"noise density is piecewise constant at level {game.noise.level}, "
            f"not representable at level {n}"
        )
    h = Fraction(1, 2**n)
    nu = game.value_dist
    cells = [k for k in range(2**n, -1, -1) if nu.cell_mass(n, k) > 0]
    values = tuple(k * h for k in cells)
    prior = tuple(nu.cell_mass(n, k) for k in cells)
    noise, probs = [], []
    for j in range(2 ** (n + 1)):
        z = -1 + j * h
        m = game.noise.mass(z, z + h)
        if m > 0:
            noise.append(z)
            probs.append(m)
    trades = tuple(game.x_lo + j * h for j in range((game.x_hi - game.x_lo) * 2**n + 1))
    spec = GameSpec.full_information(values, prior, tuple(noise), tuple(probs), trades)
    return DiscretizationLevel(n, game, spec, tuple(cells), trades, tuple(noise))


# ---------------------------------------------------------------------------
# utilities and pricing identities in continuum form


def _avg_price(game: ContinuousGame, x: Fraction, price: StepPriceFunction) -> Fraction:
    """Integral of S(x + z) g(z) dz over the true noise density."""
    h = Fraction(1, 2**price.level)
    pts = set(game.noise.breakpoints())
    for j in range(len(price.values) + 1):
        z = price.y_lo + j * h - x
        if -1 < z < 1:
            pts.add(z)
    pts = sorted(pts)
    total = Fraction(0)
    for a, b in zip(pts, pts[1:]):
        m = game.noise.mass(a, b)
        if m:
            total += m * price(x + a)
    return total


def _cell_integrals(game, strategy: StepYoungMeasure, price: StepPriceFunction, n: int):
    """Per value cell k at level n: (mass, moment, E[x], E[x S(x+z)])."""
    if not strategy.is_step:
        raise DomainError("utility needs a strategy with point-mass trades")
    cache = {}
    out = []
    shift = n - strategy.level
    if shift < 0:
        raise DomainError("strategy is finer than the requested value grid")
    for k in range(2**n + 1):
        ks = k >> shift if k < 2**n else 2**strategy.level
        mass = game.value_dist.cell_mass(n, k)
        if mass == 0:
            continue
        ex, exs = Fraction(0), Fraction(0)
        for x, w in strategy.atoms[ks].items():
            if x not in cache:
                cache[x] = _avg_price(game, x, price)
            ex += w * x
            exs += w * x * cache[x]
        out.append((k, mass, game.value_dist.cell_moment(n, k), ex, exs))
    return out


def discrete_utility(level: DiscretizationLevel, strategy: StepYoungMeasure,
                     price: StepPriceFunction) -> Fraction:
    """u^n: value floored to the level-n grid, true continuous noise."""
    h = Fraction(1, 2**level.n)
    return sum((mass * (k * h) * ex - mass * exs
                for k, mass, _, ex, exs in _cell_integrals(level.game, strategy, price, level.n)),
               Fraction(0))


def continuous_utility(game: ContinuousGame, strategy: StepYoungMeasure,
                       price: StepPriceFunction) -> Fraction:
    """u with the true value; strategy and price are step objects."""
    n = max(strategy.level, 1)
    return sum((mom * ex - mass * exs
                for _, mass, mom, ex, exs in _cell_integrals(game, strategy, price, n)),
               Fraction(0))


def floor_error_gap(level: DiscretizationLevel, strategy: StepYoungMeasure,
                    price: StepPriceFunction) -> tuple[Fraction, Fraction]:
    """(|u^n - u|, max(|x_lo|, |x_hi|) / 2^n) for a level-n pair."""
    gap = abs(discrete_utility(level, strategy, price)
              - continuous_utility(level.game, strategy, price))
    bound = Fraction(max(abs(level.game.x_lo), abs(level.game.x_hi)), 2**level.n)
    return gap, bound


def pricing_residuals(level: DiscretizationLevel, strategy: StepYoungMeasure,
                      price: StepPriceFunction, levels=None) -> dict:
    """{m: max over flow cells A of level m of |E[S 1_A] - E[floor(v) 1_A]|}.

    Both sides integrate the true noise density cell by cell on the level-n
    grid, where the density, the price and the trade atoms are all constant.
    """
    game = level.game
    n = level.n
    if price.level > n or strategy.level > n:
        raise DomainError("strategy and price must live on grids no finer than the level")
    h = Fraction(1, 2**n)
    n_cells = (game.y_hi - game.y_lo) * 2**n
    lhs = [Fraction(0)] * n_cells
    rhs = [Fraction(0)] * n_cells
    zmass = [game.noise.mass(-1 + j * h, -1 + (j + 1) * h) for j in range(2 ** (n + 1))]
    shift = n - strategy.level
    for k in range(2**n + 1):
        mass = game.value_dist.cell_mass(n, k)
        if mass == 0:
            continue
        ks = k >> shift if k < 2**n else 2**strategy.level
        for x, w in strategy.atoms[ks].items():
            base = int((x - game.y_lo - 1) * 2**n)
            for j, g in enumerate(zmass):
                if g:
                    c = base + j
                    lhs[c] += mass * w * g * price.values[c]
                    rhs[c] += mass * w * g * (k * h)
    out = {}
    for m in (range(n + 1) if levels is None else levels):
        if m > n:
            raise DomainError(f"cells of level {m} are finer than the level-{n} grid")
        size = 2 ** (n - m)
        out[m] = max(abs(sum(lhs[i:i + size]) - sum(rhs[i:i + size]))
                     for i in range(0, n_cells, size))
    return out


# ---------------------------------------------------------------------------
# solving a sequence of levels


@dataclass
class LevelSolution:
    level: DiscretizationLevel
    certificate: object
    strategy: BehaviourStrategy
    prices: PricingSystem
    step_strategy: StepYoungMeasure
    step_price: StepPriceFunction
    utility: Fraction


def _rationalise(P: np.ndarray, denom: int = 10**6) -> np.ndarray:
    out = np.empty(P.shape, dtype=object)
    for i, row in enumerate(P):
        q = [Fraction(float(p)).limit_denominator(denom) for p in row]
        j = int(np.argmax(row))
        q[j] = 1 - (sum(q) - q[j])
        out[i] = q
    return out


def solve_sequence(game: ContinuousGame, n_range, config=None) -> tuple[list, list]:
    """Solve each level; returns (solutions, notices).

    The float solver output is rounded to rationals and the reached prices
    are recomputed exactly by Bayes' rule, so each level's own pricing
    identity holds in rational arithmetic.
    """
    from .solver import sequential_equilibrium
    from .verify import completed_prices

    n_range = list(n_range)
    if not n_range:
        raise ValueError("n_range is empty")
    sols, notices = [], []
    for n in n_range:
        try:
            level = discretize(game, n)
            cert = sequential_equilibrium(level.spec, config)
        except TreeTooLarge as exc:
            notices.append(f"level {n}: {exc}; sequence truncated")
            break
        tree = level.tree
        strat = BehaviourStrategy(tree, [_rationalise(cert.strategy.probs[0])], check=False)
        exact = rational_prices(tree, strat)
        fill = [np.array([Fraction(float(v)).limit_denominator(10**6) for v in p], dtype=object)
                for p in cert.prices.prices]
        merged = [np.where(d, p, f) for p, d, f in zip(exact.prices, exact.defined, fill)]
        prices = completed_prices(tree, strat, PricingSystem(tree, merged, check=False))
        step_s = level.to_step(strat)
        step_p = level.price_step(prices)
        sols.append(LevelSolution(level, cert, strat, prices, step_s, step_p,
                                  discrete_utility(level, step_s, step_p)))
    return sols, notices


# ---------------------------------------------------------------------------
# cell-conditional approximants and narrow-convergence proxies


def approximate_strategy(target: StepYoungMeasure, n: int,
                         value_dist: ValueDistribution) -> StepYoungMeasure:
    """Cell-conditional discretisation of ``target`` onto the level-n grids.

    Trade mass on [l/2^n, (l+1)/2^n) moves to the atom l/2^n; value cells of
    zero mass trade zero.
    """
    m = target.level
    if n < m:
        raise RefinementError(f"target lives on level {m}; cannot approximate at level {n}")
    h = Fraction(1, 2**n)
    atoms = []
    for k in range(2**n + 1):
        if value_dist.cell_mass(n, k) == 0:
            atoms.append({Fraction(0): Fraction(1)})
            continue
        ks = k >> (n - m) if k < 2**n else 2**m
        cell: dict = {}
        for x, w in target.atoms[ks].items():
            key = _floor_grid(x, n)
            cell[key] = cell.get(key, Fraction(0)) + w
        for a, b, w in target.uniform[ks]:
            lo = _floor_grid(a, n)
            while lo < b:
                part = (min(b, lo + h) - max(a, lo)) / (b - a)
                if part > 0:
                    cell[lo] = cell.get(lo, Fraction(0)) + w * part
                lo += h
        atoms.append(cell)
    return StepYoungMeasure(n, atoms)


def _test_integrals(strategy: StepYoungMeasure, value_dist, j: int, power: int) -> list:
    """Integrals of 1_A(v) x^power over value cells A of level j (plus {1})."""
    m = strategy.level
    out = [Fraction(0)] * (2**j + 1)
    for k in range(2**m + 1):
        mass = value_dist.cell_mass(m, k)
        if mass:
            out[k >> (m - j) if k < 2**m else 2**j] += mass * strategy.moment(k, power)
    return out


def narrow_proxy(a: StepYoungMeasure, b: StepYoungMeasure, value_dist: ValueDistribution,
                 powers=(0, 1, 2, 3)) -> float:
    """max over dyadic value cells A and test functions x^p of the gap in
    the integral of 1_A(v) x^p."""
    top = min(a.level, b.level)
    worst = Fraction(0)
    for p in powers:
        for j in range(top + 1):
            ia = _test_integrals(a, value_dist, j, p)
            ib = _test_integrals(b, value_dist, j, p)
            worst = max(worst, max(abs(x - y) for x, y in zip(ia, ib)))
    return float(worst)


# ---------------------------------------------------------------------------
# forward averages of prices


@dataclass
class CesaroResult:
    averages: list
    increments: list
    tail_oscillation: float
    level: int


def cesaro_prices(prices: list, window: int | None = None) -> CesaroResult:
    """Forward averages A_n = mean(S^n, ..., S^{n+w-1}) on the finest grid.

    ``window=None`` averages over the whole remaining tail.  Reports the
    sup-norm increments between consecutive averages and the cellwise
    oscillation (max minus min) of the averages.
    """
    if len(prices) < 2:
        raise ValueError("need at least two price functions")
    if window is not None and window < 1:
        raise ValueError("window must be a positive integer")
    n = max(p.level for p in prices)
    grid = np.array([p.refine(n) for p in prices])
    w = len(prices) if window is None else window
    avgs = [grid[i:min(i + w, len(prices))].mean(axis=0) for i in range(len(prices))]
    inc = [float(np.max(np.abs(a - b))) for a, b in zip(avgs, avgs[1:])]
    stack = np.array(avgs)
    osc = float(np.max(stack.max(axis=0) - stack.min(axis=0)))
    return CesaroResult(avgs, inc, osc, n)


CSV_COLUMNS = ("n", "utility", "cesaro_utility", "pricing_residual", "narrow_proxy",
               "price_oscillation")


def convergence_report(solutions: list, window: int | None = None) -> list[dict]:
    """One row per level with utility, its forward average, the largest own
    and coarser-cell pricing residual, and distances to the next level."""
    utils = [float(s.utility) for s in solutions]
    w = len(solutions) if window is None else window
    rows = []
    ces = cesaro_prices([s.step_price for s in solutions], window) if len(solutions) > 1 else None
    for i, sol in enumerate(solutions):
        lv = sol.level
        resid = max(pricing_residuals(lv, sol.step_strategy, sol.step_price).values())
        nxt = solutions[i + 1] if i + 1 < len(solutions) else None
        rows.append({
            "n": lv.n,
            "utility": utils[i],
            "cesaro_utility": float(np.mean(utils[i:i + w])),
            "pricing_residual": float(resid),
            "narrow_proxy": (narrow_proxy(sol.step_strategy, nxt.step_strategy,
                                          lv.game.value_dist) if nxt else ""),
            "price_oscillation": ces.increments[i] if ces and nxt else "",
        })
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
