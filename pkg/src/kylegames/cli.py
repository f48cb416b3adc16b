"""Command line interface: solve, verify, reproduce and limit.

Exit codes: 0 pass, 2 verification failed, 3 parse or usage error,
4 resource cap exceeded, 5 consistency cannot be verified.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
import time
from fractions import Fraction

import numpy as np

from . import examples
from .continuum import (
    ContinuousGame,
    NoiseDensity,
    ValueDistribution,
    convergence_report,
    report_csv,
    solve_sequence,
    uniform_continuum,
)
from .game import DomainError, SpecError, TreeTooLarge, build_tree
from .io import (
    ConfigError,
    certificate_from_dict,
    certificate_to_dict,
    dumps,
    fmt,
    load_json,
    parse_rational,
    report_to_dict,
    spec_from_dict,
)
from .solver import (
    REFERENCE_POLY_EPS_1_8,
    SolverConfig,
    SupportEnumerationTooLarge,
    indifference_root,
    poly_relative_value,
    profit_curve,
    profit_pair,
    sequential_equilibrium,
    support_enumeration_single_period,
)
from .verify import (
    ConsistencyUnverifiable,
    check_assumption_grid,
    check_order_bound,
    check_structure_lemma,
    pure_scan,
    verify_kyle,
    verify_sequential,
)

EXIT_OK, EXIT_FAIL, EXIT_PARSE, EXIT_CAP, EXIT_UNVERIFIABLE = 0, 2, 3, 4, 5

CONTINUUM_BUILTINS = {"uniform-continuum": uniform_continuum}
REPRODUCE_TARGETS = ("example-2-1-curve", "example-2-1-pure-scan", "example-3-1",
                     "theorem-bound")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(text: str, path: str | None):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# config handling


def solver_config(data: dict | None, overrides: dict | None = None) -> SolverConfig:
    fields = {f.name for f in dataclasses.fields(SolverConfig)}
    kwargs = {}
    for key, value in (data or {}).items():
        if key not in fields:
            raise ConfigError(f"solver.{key}", "unknown setting")
        kwargs[key] = tuple(value) if key == "epsilon_schedule" else value
    kwargs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return SolverConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from exc


def builtin_spec(name: str, noise_eps=None, n=None):
    if name not in examples.BUILTINS:
        known = ", ".join(sorted([*examples.BUILTINS, *CONTINUUM_BUILTINS]))
        raise ConfigError("builtin", f"unknown built-in {name!r}; known: {known}")
    if name == "example-2-1":
        eps = "1/8" if noise_eps is None else parse_rational(noise_eps, "noise_eps")
        try:
            return examples.example_2_1(eps)
        except ValueError as exc:
            raise ConfigError("noise_eps", str(exc)) from exc
    if name == "theorem-3-example":
        return examples.theorem_example(2 if n is None else n)
    return examples.BUILTINS[name]()


def load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected a JSON object")
    return doc


def spec_from_args(args, config: dict):
    if args.builtin:
        return builtin_spec(args.builtin, args.noise_eps, getattr(args, "n", None))
    if "builtin" in config:
        opts = config.get("builtin_args", {})
        return builtin_spec(config["builtin"], opts.get("noise_eps", args.noise_eps),
                            opts.get("n"))
    if "game" in config:
        return spec_from_dict(config["game"])
    raise UsageError("give --builtin NAME or --config FILE with a game block")


def continuum_from_config(data: dict) -> ContinuousGame:
    try:
        vd = data["value_dist"]
        nd = data["noise"]
        return ContinuousGame(
            ValueDistribution(
                tuple((parse_rational(p, "continuum.value_dist.atoms"),
                       parse_rational(w, "continuum.value_dist.atoms"))
                      for p, w in vd.get("atoms", [])),
                int(vd.get("density_level", 0)),
                tuple(parse_rational(d, "continuum.value_dist.density")
                      for d in vd.get("density", [])),
            ),
            NoiseDensity(int(nd["level"]),
                         tuple(parse_rational(g, "continuum.noise.values") for g in nd["values"])),
            int(data["x_lo"]), int(data["x_hi"]),
        )
    except KeyError as exc:
        raise ConfigError(f"continuum.{exc.args[0]}", "missing") from exc
    except DomainError as exc:
        raise ConfigError("continuum", str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def _summary(cert, report) -> str:
    spec = cert.spec
    tree = build_tree(spec)
    lines = [f"status: {cert.status}", f"method: {cert.method}",
             f"verification: {'pass' if report.passed else 'fail'} "
             f"(gain {fmt(report.max_deviation_gain)}, "
             f"pricing residual {fmt(report.pricing_residual)})"]
    if tree.T == 1:
        lines.append("prices:")
        for flow, price in cert.prices.items():
            lines.append(f"  S({fmt(flow[0])}) = {fmt(price)}")
    if tree.T == 2 and tree.K == 2 and tree.N == 2 and tuple(spec.trades) == (0, 1):
        alpha = float(cert.strategy.probs[0][0, 1])
        lines.append(f"alpha (first-round buy probability at the high value): {alpha:.10f}")
    return "\n".join(lines) + "\n"


def cmd_solve(args) -> int:
    config = load_run_config(args.config)
    spec = spec_from_args(args, config)
    cfg = solver_config(config.get("solver"), {"mode": args.mode if args.mode != "auto" else None})
    mode = args.mode
    if mode == "auto":
        mode = config.get("solver", {}).get("mode", "auto")
    tree = build_tree(spec)
    if mode == "auto":
        mode = "support_enumeration" if tree.T == 1 else "homotopy"
    started = time.perf_counter()
    certs = []
    if mode in ("support_enumeration", "both"):
        certs.extend(support_enumeration_single_period(spec, cfg))
    if mode in ("homotopy", "both") or not certs:
        certs.append(sequential_equilibrium(spec, cfg))
    cert = certs[0]
    report = verify_kyle(spec, cert.strategy, cert.prices)
    cert.verification = report
    elapsed = time.perf_counter() - started
    doc = certificate_to_dict(cert)
    doc["diagnostics"]["wall_seconds"] = elapsed
    if len(certs) > 1:
        doc["diagnostics"]["equilibria_found"] = len(certs)
    if args.out:
        _emit(dumps(doc), args.out)
    if args.report:
        _emit(dumps(report_to_dict(report)), args.report)
    sys.stdout.write(_summary(cert, report))
    if len(certs) > 1:
        sys.stdout.write(f"equilibria found: {len(certs)}\n")
    if not args.out:
        sys.stdout.write(dumps(doc))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    doc = load_json(args.certificate)
    cert = certificate_from_dict(doc)
    if args.sequential:
        try:
            report = verify_sequential(cert.spec, cert, tol=args.tol or 1e-6)
        except ConsistencyUnverifiable as exc:
            sys.stderr.write(f"consistency unverifiable: {exc}\n")
            return EXIT_UNVERIFIABLE
    else:
        report = verify_kyle(cert.spec, cert.strategy, cert.prices, tol=args.tol)
    out = dumps(report_to_dict(report))
    _emit(out, args.out)
    verdict = "pass" if report.passed else "fail"
    sys.stderr.write(f"verification: {verdict}\n")
    if report.pricing_witness and report.pricing_residual:
        flow = ", ".join(str(y) for y in report.pricing_witness["flow"])
        sys.stderr.write(f"pricing witness flow: ({flow})\n")
    if args.sequential and report.consistency == "unverifiable":
        return EXIT_UNVERIFIABLE
    return EXIT_OK if report.passed else EXIT_FAIL


def _reproduce_curve(args) -> int:
    spec = builtin_spec("example-2-1", args.noise_eps)
    step = float(args.grid)
    if not 0 < step <= 0.5:
        raise ConfigError("grid", "grid step must lie in (0, 1/2]")
    grid = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    rows = profit_curve(spec, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "profit_buy", "profit_wait"])
    for a, b, c in rows:
        w.writerow([f"{a:.6f}", f"{b:.12f}", f"{c:.12f}"])
    _emit(buf.getvalue(), args.out)
    roots = indifference_root(spec)
    for r in roots:
        buy, _ = profit_pair(spec, r)
        line = f"root alpha={r:.10f} profit={buy:.10f}"
        if spec.noise_probs[0] == Fraction(1, 8):
            line += f" poly_relative={poly_relative_value(r, REFERENCE_POLY_EPS_1_8):.3e}"
        sys.stderr.write(line + "\n")
    if not roots:
        sys.stderr.write("no indifference root in (0, 1)\n")
    return EXIT_OK


def _reproduce_scan(args) -> int:
    spec = builtin_spec("example-2-1", args.noise_eps)
    started = time.perf_counter()
    res = pure_scan(spec)
    msg = (f"pure strategies: {res.total}\nfailing verification: {res.failing}\n"
           f"smallest deviation gain: {res.min_gain:.6g}\n"
           f"exactly confirmed near-equilibria: {res.exact_confirmations}\n"
           f"seconds: {time.perf_counter() - started:.2f}\n")
    _emit(msg, args.out)
    return EXIT_OK


def _reproduce_example_3_1(args) -> int:
    spec = examples.example_3_1()
    certs = support_enumeration_single_period(spec)
    tree = build_tree(spec)
    buf = io.StringIO()
    buf.write("flow,price\n")
    cert = certs[0]
    for flow, price in cert.prices.items():
        buf.write(f"{fmt(flow[0])},{fmt(price)}\n")
    buf.write("value,trade\n")
    for a, key in enumerate(tree.keys[0]):
        k = int(np.argmax([float(p) for p in cert.strategy.probs[0][a]]))
        v = spec.values[key.cells[0]]
        buf.write(f"{fmt(v)},{fmt(spec.trades[k])}\n")
    buf.write(f"equilibria,{len(certs)}\n")
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _reproduce_theorem(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "bound", "kyle_pass", "buy_branch", "sell_branch", "lemma_pass"])
    ok = True
    for n in range(1, args.max_n + 1):
        spec = examples.theorem_example(n)
        tree = build_tree(spec)
        rule = {0: tree.K - 1, 1: 0}  # high value buys 2n, low value sells 2n
        from .game import strategy_from_rule
        from .pricing import rational_prices
        from .verify import completed_prices

        strat = strategy_from_rule(spec, lambda key, tr: rule[key.cells[0]])
        prices = completed_prices(tree, strat, rational_prices(tree, strat))
        rep = verify_kyle(spec, strat, prices)
        bound = check_order_bound(spec, strat, prices)
        lemma = check_structure_lemma(spec, strat, prices)
        lemma_ok = all(r.passed for r in lemma.values())
        ok &= rep.passed and lemma_ok and all(r.passed for r in bound.values())
        w.writerow([n, fmt(6 + 6 / spec.noise_probs[spec.noise_support.index(1)]),
                    rep.passed, bound["buy"].note.split("branch ")[-1],
                    bound["sell"].note.split("branch ")[-1], lemma_ok])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_reproduce(args) -> int:
    handlers = {
        "example-2-1-curve": _reproduce_curve,
        "example-2-1-pure-scan": _reproduce_scan,
        "example-3-1": _reproduce_example_3_1,
        "theorem-bound": _reproduce_theorem,
    }
    if args.target not in handlers:
        raise UsageError(f"unknown target {args.target!r}; choose from {', '.join(REPRODUCE_TARGETS)}")
    return handlers[args.target](args)


def cmd_limit(args) -> int:
    config = load_run_config(args.config)
    if args.n is not None:
        n_range = list(args.n)
    elif "n_range" in config:
        n_range = list(config["n_range"])
    else:
        n_range = list(range(args.n_min, args.n_max + 1))
    if not n_range:
        raise UsageError("n_range is empty")
    if "continuum" in config:
        game = continuum_from_config(config["continuum"])
    else:
        name = args.builtin or config.get("builtin", "uniform-continuum")
        if name not in CONTINUUM_BUILTINS:
            raise ConfigError("builtin", f"{name!r} is not a continuum game; "
                                         f"known: {', '.join(CONTINUUM_BUILTINS)}")
        game = CONTINUUM_BUILTINS[name]()
    cfg = solver_config(config.get("solver"))
    sols, notices = solve_sequence(game, n_range, cfg)
    for note in notices:
        sys.stderr.write(note + "\n")
    if not sols:
        return EXIT_CAP
    rows = convergence_report(sols, args.window)
    _emit(report_csv(rows), args.out)
    return EXIT_OK if not notices else EXIT_CAP


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kylegames", description="Discrete Kyle insider-trading games.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("solve", help="compute an equilibrium certificate")
    p.add_argument("--builtin", help="built-in game name")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--noise-eps", help="noise weight for example-2-1, e.g. 1/8")
    p.add_argument("--n", type=int, help="size parameter for theorem-3-example")
    p.add_argument("--mode", default="auto",
                   choices=["auto", "homotopy", "support_enumeration", "both"])
    p.add_argument("--out", help="certificate output path")
    p.add_argument("--report", help="verification report output path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="check a certificate")
    p.add_argument("certificate")
    p.add_argument("--sequential", action="store_true",
                   help="check subgame optimality and belief consistency")
    p.add_argument("--tol", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reproduce", help="regenerate a reference table")
    p.add_argument("target", help=", ".join(REPRODUCE_TARGETS))
    p.add_argument("--noise-eps", default="1/8")
    p.add_argument("--grid", default="1e-3")
    p.add_argument("--max-n", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("limit", help="dyadic continuum-limit diagnostics")
    p.add_argument("--builtin")
    p.add_argument("--config")
    p.add_argument("--n", type=int, nargs="*", help="explicit grid exponents")
    p.add_argument("--n-min", type=int, default=2)
    p.add_argument("--n-max", type=int, default=4)
    p.add_argument("--window", type=int, help="forward averaging window (default: whole tail)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_limit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage().strip())
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_PARSE
    except ConfigError as exc:
        sys.stderr.write(f"parse error: {exc}\n")
        return EXIT_PARSE
    except (TreeTooLarge, SupportEnumerationTooLarge) as exc:
        sys.stderr.write(f"resource cap: {exc}\n")
        return EXIT_CAP
    except (SpecError, DomainError) as exc:
        sys.stderr.write(f"invalid input: {exc}\n")
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
