"""JSON documents for specs, configs, certificates and verification reports.

Exact numbers are written as canonical ``"p/q"`` strings (lowest terms, no
denominator for integers); floats stay JSON numbers.
"""

from __future__ import annotations

import dataclasses
import json
import math
from fractions import Fraction

import numpy as np

from .game import BehaviourStrategy, GameSpec, NodeKey, SpecError, build_tree
from .pricing import BeliefSystem, PricingSystem

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """A document field failed to parse; ``field`` names it."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def fmt(value):
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return None if math.isnan(v) else v
    if isinstance(value, (np.integer, int)) and not isinstance(value, bool):
        return int(value)
    return value


def parse_rational(value, field: str) -> Fraction:
    if isinstance(value, bool) or value is None:
        raise ConfigError(field, f"expected a rational number, got {value!r}")
    try:
        if isinstance(value, str):
            return Fraction(value.strip())
        if isinstance(value, int):
            return Fraction(value)
        if isinstance(value, float):
            return Fraction(repr(value))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(field, f"not a rational number: {value!r}") from exc
    raise ConfigError(field, f"expected a rational number, got {value!r}")


def parse_number(value, field: str):
    """Exact strings become Fractions, JSON floats stay floats."""
    if isinstance(value, float):
        return value
    return parse_rational(value, field)


def jsonable(obj):
    """Recursively convert library objects to JSON-compatible data."""
    if isinstance(obj, NodeKey):
        return {"cells": list(obj.cells), "trades": [fmt(x) for x in obj.trades],
                "noise": [fmt(z) for z in obj.noise]}
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()] if obj.dtype != object else \
            [jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return fmt(obj)


# ---------------------------------------------------------------------------
# game specs


def spec_to_dict(spec: GameSpec) -> dict:
    return {
        "horizon": spec.horizon,
        "values": [fmt(v) for v in spec.values],
        "partitions": [[list(c) for c in part] for part in spec.partitions],
        "prior": [fmt(p) for p in spec.prior],
        "noise_support": [fmt(z) for z in spec.noise_support],
        "noise_probs": [fmt(p) for p in spec.noise_probs],
        "trades": [fmt(x) for x in spec.trades],
    }


def _rational_list(data: dict, key: str, where: str) -> tuple:
    if key not in data:
        raise ConfigError(f"{where}.{key}", "missing")
    items = data[key]
    if not isinstance(items, list):
        raise ConfigError(f"{where}.{key}", "expected a list")
    return tuple(parse_rational(v, f"{where}.{key}[{i}]") for i, v in enumerate(items))


def spec_from_dict(data: dict, where: str = "game") -> GameSpec:
    if not isinstance(data, dict):
        raise ConfigError(where, "expected an object")
    values = _rational_list(data, "values", where)
    prior = _rational_list(data, "prior", where)
    noise = _rational_list(data, "noise_support", where)
    probs = _rational_list(data, "noise_probs", where)
    trades = _rational_list(data, "trades", where)
    horizon = data.get("horizon", 1)
    if not isinstance(horizon, int) or isinstance(horizon, bool):
        raise ConfigError(f"{where}.horizon", "expected an integer")
    parts = data.get("partitions")
    if parts is None:
        parts = [[[i] for i in range(len(values))]] * horizon
    try:
        return GameSpec(horizon, values, tuple(tuple(tuple(c) for c in p) for p in parts),
                        prior, noise, probs, trades)
    except SpecError as exc:
        raise ConfigError(where, str(exc)) from exc


# ---------------------------------------------------------------------------
# certificates


def _cells(row) -> list:
    # exact rows may hold plain ints; write them as canonical rationals too
    if isinstance(row, np.ndarray) and row.dtype == object:
        return [fmt(Fraction(v)) for v in row]
    return [fmt(v) for v in row]


def _rows(arr) -> list:
    return [_cells(row) for row in arr]


def _array(rows, field: str, shape):
    vals = [[parse_number(v, f"{field}[{i}][{j}]") for j, v in enumerate(row)]
            for i, row in enumerate(rows)]
    exact = all(isinstance(v, Fraction) for row in vals for v in row)
    arr = np.array(vals, dtype=object if exact else float)
    if arr.shape != shape:
        raise ConfigError(field, f"expected shape {shape}, got {arr.shape}")
    return arr


def certificate_to_dict(cert) -> dict:
    tree = build_tree(cert.spec)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "certificate",
        "game": spec_to_dict(cert.spec),
        "status": cert.status,
        "method": cert.method,
        "strategy": [
            [{"node": jsonable(key), "probs": _cells(row)}
             for key, row in zip(tree.keys[t], cert.strategy.probs[t])]
            for t in range(tree.T)
        ],
        "prices": [
            [{"flow": [fmt(y) for y in tree.flow_tuple(t, i)],
              "price": fmt(cert.prices.prices[t][i]) if cert.prices.defined[t][i] else None}
             for i in range(tree.n_flows(t))]
            for t in range(tree.T)
        ],
        "beliefs": None if cert.beliefs is None else [_rows(p) for p in cert.beliefs.probs],
        "trace": [
            {"eps": lv.eps, "residual": lv.residual, "converged": bool(lv.converged),
             "method": lv.method, "iterations": lv.iterations, "limit_gain": lv.limit_gain,
             "strategy": [_rows(p) for p in lv.strategy],
             "beliefs": [_rows(p) for p in lv.beliefs]}
            for lv in cert.trace
        ],
        "residuals": jsonable(cert.residuals),
        "diagnostics": jsonable(cert.diagnostics),
    }
    if cert.verification is not None:
        doc["verification"] = report_to_dict(cert.verification)
    return doc


def certificate_from_dict(doc: dict):
    from .solver import EquilibriumCertificate, TraceLevel

    _check_version(doc)
    spec = spec_from_dict(doc.get("game"), "game")
    tree = build_tree(spec)
    try:
        strat_rows = doc["strategy"]
        price_rows = doc["prices"]
    except KeyError as exc:
        raise ConfigError(exc.args[0], "missing") from exc
    if len(strat_rows) != tree.T or len(price_rows) != tree.T:
        raise ConfigError("strategy", f"expected {tree.T} rounds")
    probs = [_array([r["probs"] for r in strat_rows[t]], f"strategy[{t}]", (tree.n_x[t], tree.K))
             for t in range(tree.T)]
    try:
        strategy = BehaviourStrategy(tree, probs)
    except ValueError as exc:
        raise ConfigError("strategy", str(exc)) from exc
    prices, defined = [], []
    for t in range(tree.T):
        rows = price_rows[t]
        if len(rows) != tree.n_flows(t):
            raise ConfigError(f"prices[{t}]", f"expected {tree.n_flows(t)} flows")
        vals = [None if r["price"] is None else parse_number(r["price"], f"prices[{t}][{i}]")
                for i, r in enumerate(rows)]
        exact = all(isinstance(v, Fraction) for v in vals if v is not None)
        arr = np.array([0 if v is None else v for v in vals], dtype=object if exact else float)
        if exact:
            arr = np.array([Fraction(0) if v is None else v for v in vals], dtype=object)
        prices.append(arr)
        defined.append(np.array([v is not None for v in vals]))
    try:
        pricing = PricingSystem(tree, prices, defined)
    except ValueError as exc:
        raise ConfigError("prices", str(exc)) from exc
    beliefs = None
    if doc.get("beliefs") is not None:
        beliefs = BeliefSystem(tree, [_array(b, f"beliefs[{t}]", (tree.n_flows(t), tree.N))
                                      for t, b in enumerate(doc["beliefs"])])
    trace = []
    for i, lv in enumerate(doc.get("trace") or []):
        trace.append(TraceLevel(
            float(lv["eps"]),
            [np.asarray(_array(p, f"trace[{i}].strategy[{t}]", (tree.n_x[t], tree.K)), float)
             for t, p in enumerate(lv["strategy"])],
            [np.asarray(_array(b, f"trace[{i}].beliefs[{t}]", (tree.n_flows(t), tree.N)), float)
             for t, b in enumerate(lv["beliefs"])],
            float(lv["residual"]), bool(lv["converged"]), lv.get("method", ""),
            int(lv.get("iterations", 0)), float(lv.get("limit_gain") or 0.0),
        ))
    return EquilibriumCertificate(spec, strategy, beliefs, pricing, trace,
                                  doc.get("status", "converged"), doc.get("method", ""),
                                  doc.get("residuals", {}), doc.get("diagnostics", {}))


def _check_version(doc):
    if not isinstance(doc, dict):
        raise ConfigError("document", "expected a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError("format_version", f"unsupported version {version!r}")


# ---------------------------------------------------------------------------
# reports


def report_to_dict(report) -> dict:
    out = {"format_version": FORMAT_VERSION, "kind": "verification-report"}
    out.update(jsonable(report))
    return out


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON: {exc}") from exc
