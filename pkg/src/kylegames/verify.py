"""Equilibrium verification and single-period structure checks."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import optimize, sparse

from .game import (
    BehaviourStrategy,
    DomainError,
    GameTree,
    IncompletePricingError,
    backward_pass,
    expected_utility,
    forward_pass,
    pure_strategy,
    root_value,
    tree_of,
)
from .pricing import (
    PricingSystem,
    _bayes,
    as_pricing,
    joint_flow_table,
    price_from_beliefs,
    rational_prices,
)


class ConsistencyUnverifiable(ValueError):
    """A certificate without an epsilon trace cannot witness consistent beliefs."""


@dataclass
class VerificationReport:
    passed: bool
    max_deviation_gain: object
    pricing_residual: object
    tolerance: object
    exact: bool
    deviation_witness: dict | None = None
    pricing_witness: dict | None = None
    consistency: str = "not-checked"
    consistency_witness: dict | None = None
    structure_flags: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _num(x, exact):
    return x if exact else float(x)


# ---------------------------------------------------------------------------
# completing prices at unreached flows


def _reaching_trades(tree: GameTree, y_idx: int) -> list:
    """Trades that can produce the flow increment with index ``y_idx``."""
    return [tree.spec.trades[k] for k in range(tree.K) if tree.noise_kernel[k, y_idx] != 0]


def completed_prices(game, strategy: BehaviourStrategy, prices) -> PricingSystem:
    """Fill undefined prices so that the insider's best root value is smallest.

    The payoff of round t depends on the round-t price only through the term
    -x_t S_t, so a flow that only nonnegative trades can produce is priced at
    the top value and one that only nonpositive trades can produce at the
    bottom value.  Flows reachable from both sides are set by a linear program
    over the value function.
    """
    tree = tree_of(game)
    pricing = as_pricing(tree, prices)
    if pricing.complete:
        return pricing
    exact = pricing.exact
    hi, lo = tree.spec.values[0], tree.spec.values[-1]
    arrays = [p.copy() if exact else np.asarray(p, dtype=float).copy() for p in pricing.filled()]
    conflicts = []
    for t in range(tree.T):
        for idx in np.flatnonzero(~pricing.defined[t]):
            xs = _reaching_trades(tree, int(idx % tree.Y))
            if all(x >= 0 for x in xs):
                arrays[t][idx] = hi if exact else float(hi)
            elif all(x <= 0 for x in xs):
                arrays[t][idx] = lo if exact else float(lo)
            else:
                conflicts.append((t, int(idx)))
    if conflicts:
        values = _lp_completion(tree, arrays, conflicts)
        for (t, idx), s in zip(conflicts, values):
            s = min(max(s, float(lo)), float(hi))
            arrays[t][idx] = Fraction(s).limit_denominator(10**9) if exact else s
    return PricingSystem(tree, arrays, check=False)


def _lp_completion(tree: GameTree, arrays, conflicts) -> list:
    """Minimise the root value function over the free prices."""
    ft = tree.floats()
    fixed = [np.asarray(p, dtype=float).copy() for p in arrays]
    free_pos = {c: j for j, c in enumerate(conflicts)}
    for t, idx in conflicts:
        fixed[t][idx] = 0.0
    n_s = len(conflicts)
    offsets = np.cumsum([0] + tree.n_x)
    n_w = int(offsets[-1])
    rows, cols, data, rhs = [], [], [], []
    r = 0
    M, xs, zeta = ft.noise_kernel, ft.trade_values, ft.noise_probs
    for t in range(tree.T):
        vbar = ft.weights[t] @ ft.state_values
        for a in range(tree.n_x[t]):
            f = int(tree.flow[t][a])
            for k in range(tree.K):
                # Q = x (vbar - sum_y M S) + cont  <=  W_a
                const = xs[k] * vbar[a]
                for y in range(tree.Y):
                    if M[k, y] == 0:
                        continue
                    idx = f * tree.Y + y
                    coef = -xs[k] * M[k, y]
                    if (t, idx) in free_pos:
                        rows.append(r); cols.append(free_pos[(t, idx)]); data.append(coef)
                    else:
                        const += coef * fixed[t][idx]
                if t < tree.T - 1:
                    for l in range(tree.L):
                        for j, child in enumerate(tree.child[t][a, k, l]):
                            if child >= 0:
                                rows.append(r)
                                cols.append(n_s + int(offsets[t + 1]) + int(child))
                                data.append(zeta[l] * ft.child_weights[t][a, j])
                rows.append(r); cols.append(n_s + int(offsets[t]) + a); data.append(-1.0)
                rhs.append(-const)
                r += 1
    A = sparse.csr_matrix((data, (rows, cols)), shape=(r, n_s + n_w))
    c = np.zeros(n_s + n_w)
    for a, cell in enumerate(tree.cell[0]):
        c[n_s + a] = float(tree.cell_mass[0][cell])
    lo, hi = float(tree.spec.values[-1]), float(tree.spec.values[0])
    bounds = [(lo, hi)] * n_s + [(None, None)] * n_w
    res = optimize.linprog(c, A_ub=A, b_ub=np.array(rhs), bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"price completion failed: {res.message}")
    return list(res.x[:n_s])


# ---------------------------------------------------------------------------
# Kyle equilibrium


def _deviation(tree, strategy, arrays, exact):
    _, W = backward_pass(tree, strategy, arrays)
    Qopt, Wopt = backward_pass(tree, None if exact else strategy.as_float(), arrays, optimal=True)
    gain = root_value(tree, Wopt[0]) - root_value(tree, W[0])
    reach, _ = forward_pass(tree, strategy)
    witness = None
    best = None
    for t in range(tree.T):
        diff = Wopt[t] - W[t]
        live = reach[t].sum(axis=1) > 0
        for a in np.flatnonzero(live):
            d = diff[a]
            if d > 0 and (best is None or d > best):
                best = d
                k = int(np.argmax(np.asarray(Qopt[t][a], dtype=float)))
                witness = {"node": tree.keys[t][a], "trade": tree.spec.trades[k],
                           "node_gain": _num(d, exact)}
    return gain, witness


def verify_kyle(game, strategy: BehaviourStrategy, prices, tol=None) -> VerificationReport:
    """Insider optimality and rational pricing on reached flows.

    Undefined prices at unreached flows are completed in the way least
    favourable to deviations, so a pass means some completion supports the
    strategy.  Exact inputs are checked in rational arithmetic.
    """
    tree = tree_of(game)
    pricing = as_pricing(tree, prices)
    exact = strategy.exact and pricing.exact
    if tol is None:
        tol = 0 if exact else 1e-6
    strat = strategy if exact else strategy.as_float()
    bayes = rational_prices(tree, strat)
    residual = Fraction(0) if exact else 0.0
    pricing_witness = None
    for t in range(tree.T):
        for idx in np.flatnonzero(bayes.defined[t]):
            if not pricing.defined[t][idx]:
                raise IncompletePricingError(tree.flow_tuple(t, int(idx)))
            diff = abs(pricing.prices[t][idx] - bayes.prices[t][idx])
            if not exact:
                diff = float(diff)
            if diff > residual:
                residual = diff
                pricing_witness = {"flow": tree.flow_tuple(t, int(idx)),
                                   "price": pricing.prices[t][idx],
                                   "bayes": bayes.prices[t][idx]}
    notes = []
    complete = completed_prices(tree, strat, pricing)
    if not pricing.complete:
        notes.append("unreached prices completed against deviations")
    arrays = complete.filled() if exact else [np.asarray(p, dtype=float) for p in complete.prices]
    gain, witness = _deviation(tree, strat, arrays, exact)
    if not exact:
        gain = float(gain)
    gain = max(gain, 0 if exact else 0.0)
    passed = gain <= tol and residual <= tol
    return VerificationReport(passed, gain, residual, tol, exact, witness,
                              pricing_witness, notes=notes)


def subgame_gains(tree: GameTree, strategy: BehaviourStrategy, arrays):
    """Best-reply gain at every V-node, as {node: gain}, and its maximum."""
    _, W = backward_pass(tree, strategy, arrays)
    _, Wopt = backward_pass(tree, strategy, arrays, optimal=True)
    diff = [wo - w for wo, w in zip(Wopt, W)]
    best, where = root_value(tree, diff[0]), "root"
    for t in range(tree.T - 1):
        for a, key in enumerate(tree.keys[t]):
            for k in range(tree.K):
                for l in range(tree.L):
                    g = 0
                    for j, child in enumerate(tree.child[t][a, k, l]):
                        if child >= 0:
                            w = tree.child_weights[t][a, j]
                            g = g + (w if strategy.exact else float(w)) * diff[t + 1][child]
                    if g > best:
                        best, where = g, (key, k, l)
    return best, where


def verify_sequential(game, certificate, tol: float = 1e-6,
                      consistency_tol: float = 1e-3) -> VerificationReport:
    """Subgame optimality against belief-induced prices plus trace consistency."""
    tree = tree_of(game)
    if not certificate.trace:
        raise ConsistencyUnverifiable(
            "certificate has no epsilon trace; only Kyle verification is possible"
        )
    strategy = certificate.strategy
    exact = strategy.exact and certificate.beliefs.exact
    S = price_from_beliefs(tree, certificate.beliefs)
    arrays = S.prices if exact else [np.asarray(p, dtype=float) for p in S.prices]
    strat = strategy if exact else strategy.as_float()
    gain, where = subgame_gains(tree, strat, arrays)
    gain = max(gain, 0) if exact else max(float(gain), 0.0)

    bayes = rational_prices(tree, strat)
    post, reached = _bayes(tree, joint_flow_table(tree, strat), exact)
    residual, pricing_witness = 0.0, None
    for t in range(tree.T):
        for idx in np.flatnonzero(reached[t]):
            d = float(abs(S.prices[t][idx] - bayes.prices[t][idx]))
            if d > residual:
                residual = d
                pricing_witness = {"flow": tree.flow_tuple(t, int(idx)),
                                   "price": S.prices[t][idx], "bayes": bayes.prices[t][idx]}

    consistency, witness = _trace_consistency(tree, certificate, reached, consistency_tol)
    passed = gain <= tol and residual <= tol and consistency == "verified"
    report = VerificationReport(
        passed, gain, residual, tol, exact,
        None if gain <= tol else {"node": where}, pricing_witness,
        consistency, witness,
    )
    return report


def _trace_consistency(tree, certificate, reached, tol):
    """Bayes consistency of every trace level and closeness of the last level
    to the certificate's limit beliefs at unreached flows."""
    from .solver import _Evaluator

    ev = _Evaluator(tree)
    for level, lv in enumerate(certificate.trace):
        post, ok = ev.beliefs([np.asarray(p, dtype=float) for p in lv.strategy])
        for t in range(tree.T):
            if not ok[t].all():
                return "failed", {"level": level, "reason": "trace strategy not completely mixed"}
            d = np.abs(post[t] - np.asarray(lv.beliefs[t], dtype=float)).max(axis=1)
            if d.max() > 1e-9:
                idx = int(np.argmax(d))
                return "failed", {"level": level, "flow": tree.flow_tuple(t, idx),
                                  "gap": float(d.max())}
    last = certificate.trace[-1]
    limit = certificate.beliefs.as_float().probs
    for t in range(tree.T):
        d = np.abs(np.asarray(last.beliefs[t], dtype=float) - limit[t]).max(axis=1)
        d[reached[t]] = 0.0
        if d.max() > tol:
            idx = int(np.argmax(d))
            return "unverifiable", {"flow": tree.flow_tuple(t, idx), "gap": float(d.max())}
    xs = max(float(np.max(np.abs(np.asarray(p, float) - np.asarray(q, float))))
             for p, q in zip(last.strategy, certificate.strategy.probs))
    if xs > tol:
        return "unverifiable", {"strategy_gap": xs}
    return "verified", None


# ---------------------------------------------------------------------------
# brute force over pure strategies


def _batched_gains(tree: GameTree, choices: np.ndarray, fill_price: list) -> np.ndarray:
    """Kyle deviation gains of many pure strategies against their own rational
    prices, with unreached flows priced by ``fill_price`` (per round arrays)."""
    ft = tree.floats()
    M, xs, zeta = ft.noise_kernel, ft.trade_values, ft.noise_probs
    B = choices.shape[0]
    offsets = np.cumsum([0] + tree.n_x)
    xi = [np.eye(tree.K)[choices[:, offsets[t]:offsets[t + 1]]] for t in range(tree.T)]
    # forward
    P = np.broadcast_to(np.where(tree.member[0], ft.prior[None, :], 0.0),
                        (B, tree.n_x[0], tree.N)).copy()
    prices = []
    for t in range(tree.T):
        inc = xi[t] @ M  # (B, n, Y)
        contrib = P[:, :, :, None] * inc[:, :, None, :]
        G = np.zeros((tree.Y ** t, tree.n_x[t]))
        G[tree.flow[t], np.arange(tree.n_x[t])] = 1.0
        J = np.einsum("fn,bniy->bfyi", G, contrib).reshape(B, tree.Y ** (t + 1), tree.N)
        tot = J.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            S = (J @ ft.state_values) / tot
        S = np.where(tot > 0, S, fill_price[t][None, :])
        prices.append(S)
        if t < tree.T - 1:
            par = tree.parent[t + 1]
            a, k, l = par[:, 0], par[:, 1], par[:, 2]
            step = xi[t][:, a, k] * zeta[l][None, :]
            P = np.where(tree.member[t + 1][None], P[:, a, :] * step[:, :, None], 0.0)
    # backward
    Wopt = W = None
    for t in range(tree.T - 1, -1, -1):
        rows = prices[t].reshape(B, tree.Y ** t, tree.Y)[:, tree.flow[t]]
        avg = rows @ M.T
        vbar = ft.weights[t] @ ft.state_values
        q = xs[None, None, :] * (vbar[None, :, None] - avg)
        qo = q.copy()
        if W is not None:
            pad = lambda w: np.concatenate([w, np.zeros((B, 1))], axis=1)  # noqa: E731
            cw = ft.child_weights[t][None, :, None, None, :]
            q = q + ((pad(W)[:, tree.child[t]] * cw).sum(-1)) @ zeta
            qo = qo + ((pad(Wopt)[:, tree.child[t]] * cw).sum(-1)) @ zeta
        W = (xi[t] * q).sum(axis=2)
        Wopt = qo.max(axis=2)
    mass = np.array([float(tree.cell_mass[0][c]) for c in tree.cell[0]])
    return (Wopt - W) @ mass


@dataclass
class PureScanResult:
    total: int
    failing: int
    min_gain: float
    argmin: tuple
    exact_confirmations: int
    passing: list


def pure_scan(game, batch: int = 4096, confirm_below: float = 1e-9,
              cap: int = 2**20) -> PureScanResult:
    """Check every pure insider strategy against its own rational prices."""
    tree = tree_of(game)
    n = sum(tree.n_x)
    total = tree.K ** n
    if total > cap:
        raise DomainError(f"{total} pure strategies exceed the scan cap of {cap}")
    hi, lo = float(tree.spec.values[0]), float(tree.spec.values[-1])
    fill, mixed_sign = [], False
    for t in range(tree.T):
        f = np.empty(tree.Y ** (t + 1))
        for y in range(tree.Y):
            xs = _reaching_trades(tree, y)
            if all(x >= 0 for x in xs):
                f[y::tree.Y] = hi
            elif all(x <= 0 for x in xs):
                f[y::tree.Y] = lo
            else:
                mixed_sign = True
        fill.append(f)
    failing, confirmations = 0, 0
    best_gain, best_choice = np.inf, None
    passing = []
    all_choices = itertools.product(range(tree.K), repeat=n)
    while True:
        chunk = np.array(list(itertools.islice(all_choices, batch)), dtype=np.int64)
        if len(chunk) == 0:
            break
        if mixed_sign:
            gains = np.array([float(_exact_gain(tree, c)) for c in chunk])
        else:
            gains = _batched_gains(tree, chunk, fill)
        for i in np.flatnonzero(gains < confirm_below):
            confirmations += 1
            gains[i] = float(_exact_gain(tree, chunk[i]))
        failing += int(np.sum(gains > 0))
        for i in np.flatnonzero(gains <= 0):
            passing.append(tuple(int(c) for c in chunk[i]))
        j = int(np.argmin(gains))
        if gains[j] < best_gain:
            best_gain, best_choice = float(gains[j]), tuple(int(c) for c in chunk[j])
    return PureScanResult(total, failing, best_gain, best_choice, confirmations, passing)


def _exact_gain(tree, choice):
    strategy = pure_strategy(tree, list(choice))
    report = verify_kyle(tree, strategy, rational_prices(tree, strategy), tol=0)
    return report.max_deviation_gain


# ---------------------------------------------------------------------------
# single-period structure


@dataclass
class CheckResult:
    passed: bool | None
    witness: object = None
    note: str = ""


def check_assumption_grid(spec) -> CheckResult:
    """Every order flow close enough to another trade is reachable from it."""
    xs, zs = spec.trades, spec.noise_support
    zset = set(zs)
    lo, hi = min(zs), max(zs)
    for x1 in xs:
        for z1 in zs:
            y = x1 + z1
            for x2 in xs:
                need = y - x2
                if lo <= need <= hi and need not in zset:
                    return CheckResult(False, (x1, z1, x2),
                                       f"flow {y} from trade {x2} needs noise {need}")
    return CheckResult(True)


class _SinglePeriod:
    """Cell-level view of a single-period game: the insider's value is the
    conditional mean over her cell."""

    def __init__(self, game, strategy, prices, support_tol):
        tree = tree_of(game)
        if tree.T != 1:
            raise DomainError("structure checks apply to single-period games")
        self.tree = tree
        self.exact = strategy.exact and as_pricing(tree, prices).exact
        self.pricing = as_pricing(tree, prices)
        vals = tree.state_values if self.exact else tree.floats().state_values
        weights = tree.weights[0] if self.exact else tree.floats().weights[0]
        self.vbar = [sum(w * v for w, v in zip(row, vals)) for row in weights]
        self.P = strategy.probs[0] if self.exact else np.asarray(strategy.probs[0], float)
        self.tol = 0 if self.exact else support_tol
        self.xs = tree.spec.trades
        self.support = [[k for k in range(tree.K) if self.P[a, k] > self.tol]
                        for a in range(tree.n_x[0])]
        joint = joint_flow_table(tree, strategy if self.exact else strategy.as_float())[0]
        self.flow_p = joint.sum(axis=1)
        self.v_hi = max(self.vbar)
        self.v_lo = min(self.vbar)

    def reached(self):
        return [j for j in range(self.tree.Y) if self.flow_p[j] > self.tol]

    def price(self, j):
        if not self.pricing.defined[0][j]:
            return None
        return self.pricing.prices[0][j]

    def avg_price(self, k):
        total = 0
        for j in range(self.tree.Y):
            m = self.tree.noise_kernel[k, j]
            if m:
                s = self.price(j)
                if s is None:
                    return None
                total = total + (m if self.exact else float(m)) * s
        return total

    def eq(self, a, b):
        return a == b if self.exact else abs(float(a) - float(b)) <= 1e-9


def check_structure_lemma(game, strategy, prices, support_tol: float = 1e-8) -> dict:
    """Properties (i) to (iv) of single-period equilibria, each with a witness."""
    sp = _SinglePeriod(game, strategy, prices, support_tol)
    tree = sp.tree
    out = {}
    notes = []
    if not check_assumption_grid(tree.spec).passed:
        notes.append("grid assumption fails; guarantees do not apply")

    # (i) demand nondecreasing in value
    res = CheckResult(True)
    for a, b in itertools.permutations(range(tree.n_x[0]), 2):
        if sp.vbar[a] < sp.vbar[b] and sp.support[a] and sp.support[b]:
            x_low = max(sp.xs[k] for k in sp.support[a])
            x_high = min(sp.xs[k] for k in sp.support[b])
            if x_high < x_low:
                res = CheckResult(False, {"low_value": sp.vbar[a], "trade": x_low,
                                          "high_value": sp.vbar[b], "trade_high": x_high})
                break
    out["i"] = res

    # (ii) isolated order sizes are priced at their trading value
    res = CheckResult(True)
    supported = {k for s in sp.support for k in s}
    for k, x in enumerate(sp.xs):
        for sign in (1, -1):
            if sign * x <= 0:
                continue
            gap = [kk for kk in supported
                   if (x - 2 <= sp.xs[kk] < x if sign > 0 else x < sp.xs[kk] <= x + 2)]
            if gap:
                continue
            for a, sup in enumerate(sp.support):
                for kk in sup:
                    if sign * (sp.xs[kk] - x) < 0:
                        continue
                    avg = sp.avg_price(kk)
                    if avg is not None and not sp.eq(avg, sp.vbar[a]):
                        res = CheckResult(False, {"x": x, "trade": sp.xs[kk],
                                                  "value": sp.vbar[a], "avg_price": avg})
                        break
                if not res.passed:
                    break
            if not res.passed:
                break
        if not res.passed:
            break
    out["ii"] = res

    reached = sp.reached()
    ys = tree.flow_values
    # (iii) prices increase across gaps of at least two
    res = CheckResult(True)
    for j1, j2 in itertools.product(reached, repeat=2):
        if ys[j2] >= ys[j1] + 2:
            s1, s2 = sp.price(j1), sp.price(j2)
            if s1 > s2 and not sp.eq(s1, s2):
                res = CheckResult(False, {"y1": ys[j1], "y2": ys[j2], "S1": s1, "S2": s2})
                break
    out["iii"] = res

    # (iv) extreme prices propagate outwards
    res = CheckResult(True)
    for j1, j2 in itertools.product(reached, repeat=2):
        if ys[j2] < ys[j1]:
            continue
        s1, s2 = sp.price(j1), sp.price(j2)
        if sp.eq(s1, sp.v_hi) and not sp.eq(s2, sp.v_hi):
            res = CheckResult(False, {"y1": ys[j1], "y2": ys[j2], "S1": s1, "S2": s2,
                                      "pinned": "top"})
            break
        if sp.eq(s2, sp.v_lo) and not sp.eq(s1, sp.v_lo):
            res = CheckResult(False, {"y1": ys[j1], "y2": ys[j2], "S1": s1, "S2": s2,
                                      "pinned": "bottom"})
            break
    out["iv"] = res
    for r in out.values():
        r.note = "; ".join(notes)
    return out


def check_order_bound(game, strategy, prices, support_tol: float = 1e-8) -> dict:
    """Either prices pin buys at the top value or supported buys stay below
    6 + 6/zeta(1); mirrored for sells."""
    tree = tree_of(game)
    spec = tree.spec
    zs = spec.noise_support
    if (tree.T != 1 or min(zs) < -1 or max(zs) > 1 or 1 not in zs or -1 not in zs
            or 0 not in spec.trades):
        na = CheckResult(None, note="not applicable: needs one round, noise within "
                                    "[-1, 1] containing both ends, and a zero trade")
        return {"buy": na, "sell": na}
    sp = _SinglePeriod(tree, strategy, prices, support_tol)
    out = {}
    for side, sign, z_end in (("buy", 1, 1), ("sell", -1, -1)):
        zeta_end = spec.noise_probs[zs.index(z_end)]
        bound = 6 + 6 / zeta_end
        pin = sp.v_hi if sign > 0 else sp.v_lo
        pinned = True
        for k, x in enumerate(spec.trades):
            if sign * x <= 0:
                continue
            for z in zs:
                s = sp.price(tree.flow_values.index(x + z))
                if s is None or not sp.eq(s, pin):
                    pinned = False
        sizes = [spec.trades[k] for sup in sp.support for k in sup if sign * spec.trades[k] > 0]
        bounded = all(abs(x) < bound for x in sizes)
        branch = "pinned" if pinned else ("bounded" if bounded else None)
        witness = None if branch else {"order": max(sizes, key=abs), "bound": bound}
        out[side] = CheckResult(pinned or bounded, witness,
                                f"bound {bound}; branch {branch or 'none'}")
    return out
