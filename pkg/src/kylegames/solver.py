"""Equilibrium computation.

Two routes are provided.  The homotopy route follows fixed points of the
epsilon-perturbed best-reply map as epsilon shrinks: in the perturbed game
every trade has probability at least epsilon, so Bayes' rule is defined at
every order flow, and a best reply puts exactly epsilon on every suboptimal
trade.  The last level is pushed to epsilon = 0 and polished.  The second
route enumerates supports of single-period games and solves the insider's
indifference conditions directly.

Floating point is used throughout this module; exact checks live in
:mod:`kylegames.verify`.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import optimize

from .game import (
    BehaviourStrategy,
    DomainError,
    GameTree,
    NodeKey,
    backward_pass,
    forward_pass,
    root_value,
    tree_of,
)
from .pricing import BeliefSystem, PricingSystem

log = logging.getLogger(__name__)


class EpsilonRangeError(ValueError):
    """Perturbation level outside (0, 1/|E_X|)."""


class SupportEnumerationTooLarge(ValueError):
    """Too many candidate supports; use the homotopy mode instead."""


def default_schedule(n_trades: int, levels: int = 21) -> tuple:
    out = []
    for k in range(levels):
        eps = min(1.0 / (2 * n_trades), 2.0 ** (-k - 2))
        if not out or eps < out[-1]:
            out.append(eps)
    return tuple(out)


@dataclass
class SolverConfig:
    epsilon_schedule: tuple | None = None
    damping: float = 0.5
    max_iters: int = 400
    fixed_point_tol: float = 1e-12
    mode: str = "homotopy"
    cycle_window: int = 8
    tie_tol: float = 1e-12
    residual_tol: float = 1e-9
    verify_tol: float = 1e-6
    consistency_tol: float = 1e-3
    time_budget: float = 20.0
    support_cap: int = 20000

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1 or self.fixed_point_tol <= 0 or self.residual_tol <= 0:
            raise ValueError("iteration limits and tolerances must be positive")
        if self.mode not in ("homotopy", "support_enumeration", "both"):
            raise ValueError(f"unknown solver mode {self.mode!r}")
        if self.epsilon_schedule is not None:
            sched = tuple(float(e) for e in self.epsilon_schedule)
            if not sched or any(e <= 0 for e in sched) or any(
                b >= a for a, b in zip(sched, sched[1:])
            ):
                raise ValueError("epsilon schedule must be positive and strictly decreasing")
            self.epsilon_schedule = sched

    def schedule_for(self, n_trades: int) -> tuple:
        sched = self.epsilon_schedule or default_schedule(n_trades)
        for eps in sched:
            check_epsilon(eps, n_trades)
        return sched


def check_epsilon(eps, n_trades: int):
    if not 0 < eps or not eps * n_trades < 1:
        raise EpsilonRangeError(f"epsilon {eps} must satisfy 0 < eps and eps*|E_X| < 1")


@dataclass
class TraceLevel:
    eps: float
    strategy: list
    beliefs: list
    residual: float
    converged: bool
    method: str
    iterations: int
    limit_gain: float = float("nan")


@dataclass
class EquilibriumCertificate:
    spec: object
    strategy: BehaviourStrategy
    beliefs: BeliefSystem | None
    prices: PricingSystem
    trace: list = field(default_factory=list)
    status: str = "converged"
    method: str = "homotopy"
    residuals: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    verification: object = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"


# ---------------------------------------------------------------------------
# float evaluation of a profile


class _Evaluator:
    """Bayes beliefs, induced prices and per-action values of a float profile."""

    def __init__(self, tree: GameTree):
        self.tree = tree
        self.vals = tree.floats().state_values
        self.prior_rows = [
            np.asarray(w, dtype=float) for w in tree.floats().weights
        ]
        self.calls = 0

    def beliefs(self, probs, fill=None):
        tree = self.tree
        strat = BehaviourStrategy(tree, probs, check=False)
        _, joint = forward_pass(tree, strat)
        post, reached = [], []
        prior = tree.floats().prior
        for t, J in enumerate(joint):
            tot = J.sum(axis=1)
            m = tot > 0
            P = np.empty_like(J)
            P[m] = J[m] / tot[m, None]
            if fill is not None:
                P[~m] = fill[t][~m]
            else:
                P[~m] = prior
            post.append(P)
            reached.append(m)
        return post, reached

    def __call__(self, probs, fill=None):
        self.calls += 1
        post, reached = self.beliefs(probs, fill)
        prices = [P @ self.vals for P in post]
        strat = BehaviourStrategy(self.tree, probs, check=False)
        Q, W = backward_pass(self.tree, strat, prices)
        return Q, prices, post, reached


def purified(Q: np.ndarray, eps: float, tie_tol: float = 1e-12) -> np.ndarray:
    """Epsilon on suboptimal trades, the rest spread evenly over the argmax."""
    m = Q.max(axis=1, keepdims=True)
    best = Q >= m - tie_tol * (1.0 + np.abs(m))
    cnt = best.sum(axis=1, keepdims=True)
    K = Q.shape[1]
    return np.where(best, (1.0 - (K - cnt) * eps) / cnt, eps)


def eps_residual(Q, probs, eps: float) -> float:
    """max over nodes of (best value attainable in the eps-simplex - achieved)."""
    worst = 0.0
    for q, p in zip(Q, probs):
        K = q.shape[1]
        best = eps * q.sum(axis=1) + (1 - K * eps) * q.max(axis=1)
        worst = max(worst, float(np.max(best - (p * q).sum(axis=1))))
    return worst


def best_reply_eps(game, strategy: BehaviourStrategy, beliefs: BeliefSystem, node: NodeKey,
                   eps, tie_tol: float = 0.0):
    """Purified best reply at one X-node against the prices induced by ``beliefs``.

    Exact inputs (Fraction strategy, beliefs and eps) give an exact vector.
    """
    tree = tree_of(game)
    exact = strategy.exact and beliefs.exact and not isinstance(eps, float)
    if exact:
        eps = Fraction(eps)
    check_epsilon(eps, tree.K)
    t, a = tree.x_index(node)
    vals = tree.state_values if exact else tree.floats().state_values
    probs = beliefs.probs if exact else beliefs.as_float().probs
    prices = [P @ vals for P in probs]
    if exact:
        prices = [np.asarray(p, dtype=object) for p in prices]
        strat = strategy
    else:
        strat = strategy.as_float()
    Q, _ = backward_pass(tree, strat, prices)
    q = list(Q[t][a])
    top = max(q)
    if exact:
        best = [v == top for v in q]
    else:
        best = [v >= top - tie_tol * (1 + abs(top)) for v in q]
    cnt = sum(best)
    share = (1 - (tree.K - cnt) * eps) / cnt
    return tuple(share if b else eps for b in best)


# ---------------------------------------------------------------------------
# active-set corrector


def _support_from(probs, Q, eps, slack):
    out = []
    for p, q in zip(probs, Q):
        m = q.max(axis=1, keepdims=True)
        sup = (p > eps + slack) | (q >= m - 1e-9 * (1 + np.abs(m)))
        out.append(sup)
    return out


class _Layout:
    """Parametrisation of profiles with a fixed support."""

    def __init__(self, support, eps):
        self.support = [s.copy() for s in support]
        self.eps = eps
        self.mixed = []  # (t, a, supported trade indices)
        for t, s in enumerate(support):
            for a in np.flatnonzero(s.sum(axis=1) >= 2):
                self.mixed.append((t, int(a), np.flatnonzero(s[a])))
        self.size = sum(len(idx) - 1 for _, _, idx in self.mixed)

    def base(self):
        probs = []
        for s in self.support:
            K = s.shape[1]
            P = np.full(s.shape, self.eps)
            cnt = s.sum(axis=1)
            free = 1.0 - (K - cnt) * self.eps
            P[s] = np.repeat(free / np.maximum(cnt, 1), cnt)
            probs.append(P)
        return probs

    def assemble(self, u, base):
        probs = [p.copy() for p in base]
        pos = 0
        for t, a, idx in self.mixed:
            K = probs[t].shape[1]
            free = 1.0 - (K - len(idx)) * self.eps
            w = u[pos:pos + len(idx) - 1]
            pos += len(idx) - 1
            probs[t][a, idx[:-1]] = w
            probs[t][a, idx[-1]] = free - w.sum()
        return probs

    def extract(self, probs):
        parts = [probs[t][a, idx[:-1]] for t, a, idx in self.mixed]
        return np.concatenate(parts) if parts else np.zeros(0)

    def gaps(self, Q):
        parts = [Q[t][a, idx[:-1]] - Q[t][a, idx[-1]] for t, a, idx in self.mixed]
        return np.concatenate(parts) if parts else np.zeros(0)


def _scale(tree: GameTree) -> float:
    xs = tree.floats().trade_values
    v = tree.floats().state_values
    return max(1.0, float(np.max(np.abs(xs))) * float(v.max() - v.min() + 1.0)) * tree.T


def correct(ev: _Evaluator, probs, eps: float, support, fill=None, rounds: int = 25,
            tol: float = 1e-11, deadline: float | None = None):
    """Solve the indifference system on a support, adjusting it until feasible.

    Returns ``(probs, ok)``; ``ok`` means every supported trade has weight at
    least ``eps`` and no unsupported trade does better than the supported ones.
    """
    tree = ev.tree
    scale = _scale(tree)
    seen = set()
    try:
        return _correct(ev, probs, eps, support, fill, rounds, tol, deadline, scale, seen)
    except _OutOfTime:
        return probs, False


class _OutOfTime(Exception):
    pass


def _correct(ev, probs, eps, support, fill, rounds, tol, deadline, scale, seen):
    for _ in range(rounds):
        if deadline is not None and time.perf_counter() > deadline:
            return probs, False
        layout = _Layout(support, eps)
        base = layout.base()
        u0 = layout.extract(probs) if probs is not None else layout.extract(base)
        if layout.size:
            def gaps(u):
                # the inner solvers cannot be interrupted any other way
                if deadline is not None and time.perf_counter() > deadline:
                    raise _OutOfTime
                return layout.gaps(ev(layout.assemble(u, base), fill)[0]) / scale

            sol = optimize.root(gaps, u0, method="hybr", options={"xtol": 1e-14})
            u = sol.x
            if not np.all(np.isfinite(u)):
                return probs, False
            cand = layout.assemble(u, base)
        else:
            cand = base
        Q = ev(cand, fill)[0]
        if layout.size and np.max(np.abs(layout.gaps(Q))) > tol * scale:
            # try a least-squares polish before giving up on this support
            sol = optimize.least_squares(
                gaps, layout.extract(cand), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=50,
            )
            cand = layout.assemble(sol.x, base)
            Q = ev(cand, fill)[0]
        changed = False
        new_support = [s.copy() for s in support]
        for t, (p, q, s) in enumerate(zip(cand, Q, support)):
            # drop the worst negative weight per node
            low = np.where(s, p - eps, np.inf)
            bad_rows = np.flatnonzero(low.min(axis=1) < -1e-12)
            for a in bad_rows:
                if s[a].sum() > 1:
                    new_support[t][a, int(np.argmin(low[a]))] = False
                    changed = True
            # add the most profitable unsupported trade per node
            top = np.where(s, q, -np.inf).max(axis=1)
            over = np.where(~s, q - top[:, None], -np.inf)
            for a in np.flatnonzero(over.max(axis=1) > tol * scale):
                if a in bad_rows:
                    continue
                new_support[t][a, int(np.argmax(over[a]))] = True
                changed = True
        if not changed:
            if layout.size and np.max(np.abs(layout.gaps(Q))) > 1e-9 * scale:
                return cand, False
            return cand, True
        key = tuple(s.tobytes() for s in new_support)
        if key in seen:
            return cand, False
        seen.add(key)
        support = new_support
        probs = [np.clip(p, eps, 1.0) for p in cand]
    return probs, False


# ---------------------------------------------------------------------------
# fixed points of the perturbed map


@dataclass
class FixedPointResult:
    strategy: BehaviourStrategy
    beliefs: BeliefSystem
    residual: float
    converged: bool
    method: str
    iterations: int


def _damped(ev, probs, eps, cfg: SolverConfig):
    history = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        Q = ev(probs)[0]
        br = [purified(q, eps, cfg.tie_tol) for q in Q]
        new = [(1 - cfg.damping) * p + cfg.damping * b for p, b in zip(probs, br)]
        change = max(float(np.max(np.abs(n - p))) for n, p in zip(new, probs))
        probs = new
        history.append(probs)
        if change <= cfg.fixed_point_tol:
            return probs, it, False, history
        if len(history) > 4 * cfg.cycle_window and it % cfg.cycle_window == 0:
            # cycling: the iterate keeps returning near earlier points without settling
            w = cfg.cycle_window
            recent = history[-w:]
            spread = max(
                float(np.max(np.abs(a - b)))
                for x, y in zip(recent[:-1], recent[1:]) for a, b in zip(x, y)
            )
            older = history[-2 * w:-w]
            old_spread = max(
                float(np.max(np.abs(a - b)))
                for x, y in zip(older[:-1], older[1:]) for a, b in zip(x, y)
            )
            if spread > 0.9 * old_spread:
                return probs, it, True, history
    return probs, it, True, history


def _window_average(history, w):
    recent = history[-w:]
    return [np.mean([h[t] for h in recent], axis=0) for t in range(len(recent[0]))]


def _logit(ev, probs, eps, cfg: SolverConfig):
    scale = _scale(ev.tree)
    lam = 1.0
    while lam > 1e-9:
        for _ in range(60):
            Q = ev(probs)[0]
            K = Q[0].shape[1]
            new = []
            for q in Q:
                z = (q - q.max(axis=1, keepdims=True)) / (lam * scale)
                e = np.exp(z)
                new.append(eps + (1 - K * eps) * e / e.sum(axis=1, keepdims=True))
            change = max(float(np.max(np.abs(n - p))) for n, p in zip(new, probs))
            probs = [0.5 * p + 0.5 * n for p, n in zip(probs, new)]
            if change < 1e-10:
                break
        lam *= 0.3
    return probs


def fixed_point_eps(game, eps: float, init: BehaviourStrategy | None = None,
                    config: SolverConfig | None = None, _ev: _Evaluator | None = None,
                    deadline: float | None = None):
    """A fixed point of the epsilon-perturbed best-reply map, with its residual.

    Past ``deadline`` (a ``time.perf_counter`` value) the slower fallback
    stages are skipped and the best iterate so far is returned unconverged.
    """
    cfg = config or SolverConfig()
    tree = tree_of(game)
    eps = float(eps)
    check_epsilon(eps, tree.K)
    ev = _ev or _Evaluator(tree)
    K = tree.K

    def project(p):
        p = np.clip(np.asarray(p, dtype=float), eps, None)
        return p / p.sum(axis=1, keepdims=True)

    if init is None:
        probs = [np.full((n, K), 1.0 / K) for n in tree.n_x]
    else:
        probs = [project(p) for p in init.as_float().probs]

    def finish(p, method, iters, ok):
        Q, _, post, _ = ev(p)
        res = eps_residual(Q, p, eps)
        good = ok and res <= cfg.residual_tol * _scale(tree)
        return FixedPointResult(
            BehaviourStrategy(tree, p, check=False), BeliefSystem(tree, post, check=False),
            res, good, method, iters,
        )

    iters = 0
    if init is not None:
        Q = ev(probs)[0]
        cand, ok = correct(ev, probs, eps, _support_from(probs, Q, eps, 1e-7),
                           deadline=deadline)
        if ok:
            out = finish(cand, "newton", 0, True)
            if out.converged:
                return out

    probs, iters, cycling, history = _damped(ev, probs, eps, cfg)
    if not cycling:
        out = finish(probs, "damped", iters, True)
        if out.converged:
            return out
    start = _window_average(history, cfg.cycle_window)

    def late():
        return deadline is not None and time.perf_counter() > deadline

    Q = ev(start)[0]
    for slack in (1e-6, 1e-3, 0.05):
        cand, ok = correct(ev, start, eps, _support_from(start, Q, eps, slack),
                           deadline=deadline)
        if ok:
            out = finish(cand, "damped+newton", iters, True)
            if out.converged:
                return out
    if late():
        return finish(start, "unconverged", iters, False)
    smooth = _logit(ev, start, eps, cfg)
    Q = ev(smooth)[0]
    for slack in (1e-6, 1e-3):
        cand, ok = correct(ev, smooth, eps, _support_from(smooth, Q, eps, slack),
                           deadline=deadline)
        if ok:
            out = finish(cand, "logit+newton", iters, True)
            if out.converged:
                return out
    log.info("eps=%g: no fixed point found, returning best iterate", eps)
    best = min((start, smooth), key=lambda p: eps_residual(ev(p)[0], p, eps))
    return finish(best, "unconverged", iters, False)


# ---------------------------------------------------------------------------
# homotopy


def _rescale(probs, old, new):
    out = []
    for p in probs:
        K = p.shape[1]
        q = new + (1 - K * new) / (1 - K * old) * (p - old)
        q = np.clip(q, new, None)
        out.append(q / q.sum(axis=1, keepdims=True))
    return out


def _clamp(probs, eps, previous=None, small=1e-3):
    """Zero the entries at the perturbation floor; with ``previous`` (the
    profile one level up) also zero small entries that shrink with eps."""
    out = []
    for t, p in enumerate(probs):
        drop = p <= eps * (1 + 1e-6) + 1e-15
        if previous is not None:
            drop |= (p < small) & (p < 0.75 * previous[t])
        q = np.where(drop, 0.0, p)
        q = q / q.sum(axis=1, keepdims=True)
        out.append(q)
    return out


def kyle_gain_float(tree: GameTree, probs, prices) -> float:
    """Root value of the best reply minus the root value of ``probs``."""
    strat = BehaviourStrategy(tree, probs, check=False)
    _, W = backward_pass(tree, strat, prices)
    _, Wopt = backward_pass(tree, None, prices, optimal=True)
    return float(root_value(tree, Wopt[0]) - root_value(tree, W[0]))


def _follow(ev, probs, old, new, cfg: SolverConfig, depth: int = 2, deadline=None):
    """Continue a converged eps-fixed point from ``old`` to ``new`` with the
    corrector, halving the step (geometrically) when the support changes."""
    init = _rescale(probs, old, new)
    Q = ev(init)[0]
    for slack in (1e-7, 1e-4):
        cand, ok = correct(ev, init, new, _support_from(init, Q, new, slack),
                           deadline=deadline)
        if ok:
            res = eps_residual(ev(cand)[0], cand, new)
            if res <= cfg.residual_tol * _scale(ev.tree):
                return cand
    if depth == 0:
        return None
    mid = float(np.sqrt(old * new))
    half = _follow(ev, probs, old, mid, cfg, depth - 1, deadline)
    if half is None:
        return None
    return _follow(ev, half, mid, new, cfg, depth - 1, deadline)


def _polish_limit(ev, probs, last_post, deadline=None):
    """Push a clamped profile to an exact eps = 0 equilibrium on reached flows."""
    support = [p > 0 for p in probs]
    cand, ok = correct(ev, probs, 0.0, support, fill=last_post, deadline=deadline)
    return cand, ok


def sequential_equilibrium(game, config: SolverConfig | None = None) -> EquilibriumCertificate:
    """Follow perturbed fixed points down the epsilon schedule and pass to the limit."""
    cfg = config or SolverConfig()
    tree = tree_of(game)
    ev = _Evaluator(tree)
    sched = cfg.schedule_for(tree.K)
    started = time.perf_counter()
    trace: list[TraceLevel] = []
    current = None
    prev_eps = None
    anchor = None  # last converged (probs, eps)
    hard_stop = started + 2 * cfg.time_budget
    for eps in sched:
        current = None
        now = time.perf_counter()
        if anchor is not None and now < hard_stop:
            late = now - started > cfg.time_budget
            probs = _follow(ev, anchor[0], anchor[1], eps, cfg, 0 if late else 2,
                            min(now + cfg.time_budget / 2, hard_stop))
            if probs is not None:
                Q, _, post, _ = ev(probs)
                current = FixedPointResult(
                    BehaviourStrategy(tree, probs, check=False),
                    BeliefSystem(tree, post, check=False),
                    eps_residual(Q, probs, eps), True, "path", 0,
                )
        if current is None and anchor is not None and \
                time.perf_counter() - started > cfg.time_budget:
            # out of time: record the continued anchor without a global search
            probs = _rescale(anchor[0], anchor[1], eps)
            Q, _, post, _ = ev(probs)
            current = FixedPointResult(
                BehaviourStrategy(tree, probs, check=False),
                BeliefSystem(tree, post, check=False),
                eps_residual(Q, probs, eps), False, "skipped", 0,
            )
        if current is None:
            init = None
            if anchor is not None:
                init = BehaviourStrategy(tree, _rescale(anchor[0], anchor[1], eps), check=False)
            deadline = min(hard_stop, max(started + cfg.time_budget,
                                          time.perf_counter() + cfg.time_budget / len(sched)))
            current = fixed_point_eps(tree, eps, init, cfg, _ev=ev, deadline=deadline)
        if current.converged:
            anchor = (current.strategy.probs, eps)
        clamped = _clamp(current.strategy.probs, eps)
        post, _ = ev.beliefs(clamped, current.beliefs.probs)
        gain = kyle_gain_float(tree, clamped, [P @ ev.vals for P in post])
        trace.append(TraceLevel(
            eps, [p.copy() for p in current.strategy.probs],
            [p.copy() for p in current.beliefs.probs], current.residual,
            current.converged, current.method, current.iterations, gain,
        ))
        prev_eps = eps

    last_post = current.beliefs.probs
    limit = _clamp(current.strategy.probs, prev_eps)
    candidates = []
    variants = [(limit, "")]
    if len(trace) > 1:
        variants.append((_clamp(current.strategy.probs, prev_eps, trace[-2].strategy), "decay-"))
    for probs, tag in variants:
        polished, ok = _polish_limit(ev, probs, last_post,
                                     time.perf_counter() + cfg.time_budget / 8)
        if ok:
            candidates.append((polished, tag + "polished"))
        candidates.append((probs, tag + "clamped"))
    # prefer a limit that is subgame optimal and stays on the traced path,
    # otherwise whichever has the smaller Kyle gain
    from .verify import subgame_gains

    scored = []
    for probs, label in candidates:
        post, reached = ev.beliefs(probs, last_post)
        prices = [P @ ev.vals for P in post]
        gain = kyle_gain_float(tree, probs, prices)
        sub = float(subgame_gains(tree, BehaviourStrategy(tree, probs, check=False), prices)[0])
        dist = max(float(np.max(np.abs(p - q))) for p, q in zip(probs, current.strategy.probs))
        sound = sub <= cfg.verify_tol and dist <= cfg.consistency_tol
        scored.append((not sound, gain, probs, post, prices, label))
    best = min(scored, key=lambda r: (r[0], r[1]))
    _, gain, probs, post, prices, label = best

    strategy = BehaviourStrategy(tree, probs, check=False)
    beliefs = BeliefSystem(tree, post, check=False)
    pricing = PricingSystem(tree, prices, check=False)
    gains = [lv.limit_gain for lv in trace]
    tail = gains[len(gains) // 2:]
    monotone = all(b <= a + cfg.verify_tol for a, b in zip(tail, tail[1:]))
    status = "converged" if gain <= cfg.verify_tol and trace[-1].converged else "unconverged"
    diagnostics = {
        "limit": label,
        "trace_monotone": monotone,
        "levels_converged": sum(lv.converged for lv in trace),
        "levels": len(trace),
        "evaluations": ev.calls,
        "seconds": time.perf_counter() - started,
    }
    if not monotone:
        diagnostics["note"] = "limit deviation gain rose along the schedule"
    return EquilibriumCertificate(
        tree.spec, strategy, beliefs, pricing, trace, status, "homotopy",
        {"kyle_gain": gain, "last_eps_residual": trace[-1].residual}, diagnostics,
    )


# ---------------------------------------------------------------------------
# single-period support enumeration


def _effective_cells(tree: GameTree):
    """Round-one cells sorted by conditional mean value, highest first."""
    vbar = [float(np.dot(w, tree.floats().state_values)) for w in tree.floats().weights[0]]
    exact = [sum(w * v for w, v in zip(row, tree.state_values)) for row in tree.weights[0]]
    return vbar, exact


def monotone_supports(tree: GameTree, cap: int):
    """Support profiles for single-period games with demand monotone in value."""
    vbar = _effective_cells(tree)[1]
    order = sorted(range(tree.n_x[0]), key=lambda a: -vbar[a])
    K = tree.K
    xs = tree.spec.trades
    subsets = [s for r in range(1, K + 1) for s in itertools.combinations(range(K), r)]
    out = []

    def rec(pos, chosen):
        if len(out) > cap:
            raise SupportEnumerationTooLarge(
                f"more than {cap} candidate supports; use the homotopy mode"
            )
        if pos == len(order):
            out.append(dict(chosen))
            return
        a = order[pos]
        for s in subsets:
            ok = True
            for b, sb in chosen.items():
                if vbar[b] > vbar[a] and max(xs[k] for k in s) > min(xs[k] for k in sb):
                    ok = False
                    break
            if ok:
                chosen[a] = s
                rec(pos + 1, chosen)
                del chosen[a]

    rec(0, {})
    return out


def _profile_from(tree, sup: dict, exact: bool):
    P = np.zeros((tree.n_x[0], tree.K), dtype=object if exact else float)
    for a, s in sup.items():
        if len(s) == 1:
            P[a, s[0]] = Fraction(1) if exact else 1.0
    return P


def support_enumeration_single_period(game, config: SolverConfig | None = None,
                                      seed: int = 0) -> list:
    """All equilibria found by solving indifference systems on monotone supports."""
    from .verify import completed_prices, verify_kyle

    cfg = config or SolverConfig()
    tree = tree_of(game)
    if tree.T != 1:
        raise DomainError("support enumeration handles single-period games only")
    profiles = monotone_supports(tree, cfg.support_cap)
    ev = _Evaluator(tree)
    rng = np.random.default_rng(seed)
    found: list[EquilibriumCertificate] = []
    seen: list[np.ndarray] = []
    scale = _scale(tree)

    def keep(strategy, exact_ok):
        P = np.asarray(strategy.probs[0], dtype=float)
        if any(float(np.max(np.abs(P - q))) < 1e-6 for q in seen):
            return
        report = verify_kyle(tree, strategy, _reached_prices(tree, strategy),
                             tol=0 if exact_ok else 1e-9)
        if not report.passed:
            return
        seen.append(P)
        prices = completed_prices(tree, strategy, _reached_prices(tree, strategy))
        found.append(EquilibriumCertificate(
            tree.spec, strategy, _beliefs_for(tree, strategy, prices), prices, [],
            "converged", "support-enumeration",
            {"kyle_gain": report.max_deviation_gain,
             "pricing_residual": report.pricing_residual},
            {"exact": exact_ok},
        ))

    for sup in profiles:
        mixed = [(a, s) for a, s in sup.items() if len(s) > 1]
        if not mixed:
            keep(BehaviourStrategy(tree, [_profile_from(tree, sup, True)], check=False), True)
            continue
        support = np.zeros((tree.n_x[0], tree.K), dtype=bool)
        for a, s in sup.items():
            support[a, list(s)] = True
        layout = _Layout([support], 0.0)
        base = layout.base()

        def gaps(u):
            return layout.gaps(ev(layout.assemble(u, base))[0]) / scale

        for u in _indifference_roots(layout, base, gaps, rng):
            probs = layout.assemble(u, base)
            if np.any(probs[0][support] <= 1e-9):
                continue
            keep(BehaviourStrategy(tree, probs, check=False), False)
    return found


# root search effort for support enumeration
SCAN_POINTS = 201
RANDOM_STARTS = 64
ZERO_GAP = 1e-12  # scaled gaps this small count as exact zeros


def _indifference_roots(layout, base, gaps, rng):
    """Roots of the gap map on the open support simplex."""
    if layout.size == 1:
        grid = np.linspace(0.0, 1.0, SCAN_POINTS)[1:-1]
        vals = np.array([gaps(np.array([g]))[0] for g in grid])
        vals[np.abs(vals) <= ZERO_GAP] = 0.0
        roots = []
        run = []  # consecutive exact zeros: one representative per component
        for lo, hi, a, b in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if a == 0:
                run.append(lo)
                continue
            if run:
                roots.append(run[len(run) // 2])
                run = []
            if a * b < 0:
                roots.append(optimize.brentq(lambda w: gaps(np.array([w]))[0], lo, hi,
                                             xtol=1e-14, rtol=1e-14))
        if vals[-1] == 0:
            run.append(grid[-1])
        if run:
            roots.append(run[len(run) // 2])
        return [np.array([r]) for r in roots]
    # several unknowns: multi-start from the best points of a random batch
    starts = []
    for _ in range(RANDOM_STARTS):
        u = []
        for t, a, idx in layout.mixed:
            w = rng.dirichlet(np.ones(len(idx)))
            u.extend(w[:-1])
        starts.append(np.array(u))
    scored = sorted(starts, key=lambda u: float(np.linalg.norm(gaps(u))))
    out = []
    for u0 in scored[:8]:
        sol = optimize.root(gaps, u0, method="hybr", options={"xtol": 1e-14})
        if sol.success and np.linalg.norm(gaps(sol.x)) < 1e-11:
            out.append(sol.x)
    return out


def _reached_prices(tree, strategy):
    from .pricing import rational_prices

    return rational_prices(tree, strategy)


def _beliefs_for(tree, strategy, prices: PricingSystem) -> BeliefSystem:
    """Beliefs matching ``prices``: Bayes where reached, two-point mixtures elsewhere."""
    from .pricing import _bayes, joint_flow_table

    exact = strategy.exact and prices.exact
    joint = joint_flow_table(tree, strategy)
    post, reached = _bayes(tree, joint, exact)
    hi, lo = tree.spec.values[0], tree.spec.values[-1]
    for t in range(tree.T):
        for idx in np.flatnonzero(~reached[t]):
            s = prices.prices[t][idx]
            row = np.zeros(tree.N, dtype=object if exact else float)
            if hi == lo:
                row[0] = 1
            else:
                w = (s - lo) / (hi - lo)
                if not exact:
                    w = float(w)
                row[0] = w
                row[-1] = row[-1] + (1 - w)
            post[t][idx] = row
    return BeliefSystem(tree, post, check=False)


# ---------------------------------------------------------------------------
# the two-round example with one mixing node


def xi_alpha(game, alpha) -> BehaviourStrategy:
    """Buy with probability alpha in round one at the high value; otherwise buy
    at every later high-value node and never buy at the low value."""
    tree = tree_of(game)
    _check_example_shape(tree)
    exact = isinstance(alpha, Fraction)
    one = Fraction(1) if exact else 1.0
    probs = []
    for t, ks in enumerate(tree.keys):
        P = np.zeros((len(ks), 2), dtype=object if exact else float)
        for a, key in enumerate(ks):
            if key.cells[0] == 1:
                P[a, 0] = one
            elif t == 0:
                P[a] = [one - alpha, alpha]
            else:
                P[a, 1] = one
        probs.append(P)
    return BehaviourStrategy(tree, probs, check=False)


def _check_example_shape(tree: GameTree):
    spec = tree.spec
    if (tree.T != 2 or tree.N != 2 or spec.trades != (0, 1)
            or any(len(p) != 2 for p in spec.partitions)):
        raise DomainError("expected the two-round, two-value, buy-or-wait game shape")


def profit_pair(game, alpha: float) -> tuple[float, float]:
    """(buy, wait) profits at the high value in round one, given prices that are
    rational for xi_alpha, with optimal continuation.  Unreached flows are priced
    at the top value, the least favourable choice for a buyer."""
    from .pricing import rational_prices

    tree = tree_of(game)
    S = rational_prices(tree, xi_alpha(tree, float(alpha)))
    top = float(tree.spec.values[0])
    Q, _ = backward_pass(tree, None, S.filled(fill=top), optimal=True)
    row = Q[0][tree.keys[0].index(NodeKey((0,)))]
    return float(row[1]), float(row[0])


def profit_curve(game, alpha_grid) -> list[tuple[float, float, float]]:
    return [(float(a), *profit_pair(game, a)) for a in alpha_grid]


def indifference_root(game, resolution: float = 1e-3, tol: float = 1e-12) -> list[float]:
    """Roots in (0, 1) of buy profit minus wait profit.

    Sign changes are bracketed on a grid of the given resolution and polished
    with the secant-bracketing method of Brent.
    """
    def gap(a):
        buy, wait = profit_pair(game, a)
        return buy - wait

    n = int(round(1 / resolution))
    grid = np.linspace(0.0, 1.0, n + 1)
    vals = [gap(a) for a in grid]
    roots = []
    for lo, hi, a, b in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if a == 0 and 0 < lo < 1:
            roots.append(float(lo))
        elif a * b < 0:
            roots.append(optimize.brentq(gap, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps))
    return roots


REFERENCE_POLY_EPS_1_8 = (750000, -9485000, 36365625, -48108800, -25782575, 80831674,
                      -21705040, -10602816)


def poly_relative_value(alpha: float, coeffs=REFERENCE_POLY_EPS_1_8) -> float:
    """|p(alpha)| divided by the leading coefficient."""
    return abs(float(np.polyval(coeffs, alpha))) / abs(coeffs[0])
