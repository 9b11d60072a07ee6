"""Problem-spec files: a flat dotted key-value format, with JSON accepted
as an alternative encoding of the same schema.

Flat format, one ``key = value`` per line, ``#`` comments::

    process.kind = gbm          # gbm | abm | general
    process.alpha = 0.1         # gbm drift rate   (abm: process.mu)
    process.sigma = 1           # volatility scale
    process.lower = 0           # state interval; "inf"/"-inf" allowed
    process.upper = inf
    process.left_boundary = natural   # or entry-not-exit (asserted, trusted)
    payoff.piece.1.interval = 0, 2
    payoff.piece.1.formula = ((x-1)^2+1)*x^2
    payoff.piece.2.interval = 2, inf
    payoff.piece.2.formula = x - 9 + (15/4)*x^2
    discount.rho = 1.2
    analysis.x_query = 1, 9     # optional value-query points
    analysis.x_ref = 1          # optional normalization point
    analysis.grid_points = 2001 # optional grid override
    mc.n_paths = 1000000        # optional Monte Carlo block
    mc.dt = 0.001
    mc.t_max = 25
    mc.seed = 42
    mc.antithetic = false
    mc.n_workers = 1

The JSON encoding nests the same fields:
``{"process": {...}, "payoff": {"pieces": [{"interval": [a, b],
"formula": "..."}]}, "discount": {"rho": ...}, "analysis": {...},
"mc": {...}}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .diffusion import DiffusionSpec
from .expr import FormulaError, PiecewiseFunction, parse
from .mc import McConfig

INF = float("inf")


class SpecValidationError(ValueError):
    """Problem-spec violation; the message names the offending field."""


@dataclass
class ProblemSpec:
    diffusion: DiffusionSpec
    payoff: PiecewiseFunction
    rho: float
    x_query: tuple
    x_ref: float | None
    grid_points: int | None
    mc: McConfig | None
    echo: dict


def _num(s, path):
    s = str(s).strip()
    try:
        if s in ("inf", "+inf"):
            return INF
        if s == "-inf":
            return -INF
        return float(s)
    except ValueError:
        raise SpecValidationError(f"{path}: not a number: {s!r}") from None


def _int(s, path):
    v = _num(s, path)
    if not math.isfinite(v) or v != int(v):
        raise SpecValidationError(f"{path}: not an integer: {s!r}")
    return int(v)


def _bool(s, path):
    t = str(s).strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise SpecValidationError(f"{path}: not a boolean: {s!r}")


def _num_list(s, path):
    if isinstance(s, (list, tuple)):
        return [_num(v, path) for v in s]
    parts = [p for p in str(s).split(",") if p.strip()]
    return [_num(p, path) for p in parts]


def _parse_flat(text):
    table = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecValidationError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in table:
            raise SpecValidationError(f"line {lineno}: duplicate key {key!r}")
        table[key] = value.strip()
    return table


def _flatten_json(doc):
    if not isinstance(doc, dict):
        raise SpecValidationError("JSON spec must be an object")
    table = {}

    def put(key, value):
        if isinstance(value, bool):
            table[key] = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            table[key] = ", ".join(str(v) for v in value)
        else:
            table[key] = str(value)

    for section in ("process", "discount", "analysis", "mc"):
        for k, v in (doc.get(section) or {}).items():
            put(f"{section}.{k}", v)
    payoff = doc.get("payoff") or {}
    for i, piece in enumerate(payoff.get("pieces") or [], start=1):
        if "interval" in piece:
            put(f"payoff.piece.{i}.interval", piece["interval"])
        if "formula" in piece:
            put(f"payoff.piece.{i}.formula", piece["formula"])
    return table


def loads_problem(text: str) -> ProblemSpec:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            table = _flatten_json(json.loads(text))
        except json.JSONDecodeError as e:
            raise SpecValidationError(f"invalid JSON: {e}") from None
    else:
        table = _parse_flat(text)
    return _build(table)


def load_problem(path) -> ProblemSpec:
    p = Path(path)
    if not p.exists():
        raise SpecValidationError(f"spec file not found: {p}")
    return loads_problem(p.read_text())


def _take(table, key, default=None, required=False):
    if key in table:
        return table.pop(key)
    if required:
        raise SpecValidationError(f"{key}: required field missing")
    return default


def _build(table):
    echo = dict(table)
    table = dict(table)

    kind = str(_take(table, "process.kind", required=True)).strip().lower()
    left_boundary = str(_take(table, "process.left_boundary", "natural")).strip()
    if kind == "gbm":
        alpha = _num(_take(table, "process.alpha", required=True), "process.alpha")
        sigma = _num(_take(table, "process.sigma", required=True), "process.sigma")
        lo = _num(_take(table, "process.lower", "0"), "process.lower")
        hi = _num(_take(table, "process.upper", "inf"), "process.upper")
        if (lo, hi) != (0.0, INF):
            raise SpecValidationError(
                "process.lower/process.upper: gbm requires the interval ]0, inf[")
        try:
            d = DiffusionSpec.gbm(alpha, sigma)
        except ValueError as e:
            raise SpecValidationError(f"process: {e}") from None
    elif kind == "abm":
        mu = _num(_take(table, "process.mu", required=True), "process.mu")
        sigma = _num(_take(table, "process.sigma", required=True), "process.sigma")
        lo = _num(_take(table, "process.lower", "-inf"), "process.lower")
        hi = _num(_take(table, "process.upper", "inf"), "process.upper")
        if (lo, hi) != (-INF, INF):
            raise SpecValidationError(
                "process.lower/process.upper: abm requires the interval ]-inf, inf[")
        try:
            d = DiffusionSpec.abm(mu, sigma)
        except ValueError as e:
            raise SpecValidationError(f"process: {e}") from None
    elif kind == "general":
        drift = _take(table, "process.drift", required=True)
        vol = _take(table, "process.volatility", required=True)
        lo = _num(_take(table, "process.lower", required=True), "process.lower")
        hi = _num(_take(table, "process.upper", required=True), "process.upper")
        try:
            d = DiffusionSpec.general(drift, vol, lo, hi, left_boundary)
        except FormulaError as e:
            raise SpecValidationError(f"process.drift/volatility: {e}") from None
        except ValueError as e:
            raise SpecValidationError(f"process: {e}") from None
    else:
        raise SpecValidationError(f"process.kind: unknown kind {kind!r}")

    pieces = []
    i = 1
    while f"payoff.piece.{i}.formula" in table or f"payoff.piece.{i}.interval" in table:
        pp = f"payoff.piece.{i}"
        interval = _num_list(_take(table, f"{pp}.interval", required=True),
                             f"{pp}.interval")
        if len(interval) != 2:
            raise SpecValidationError(f"{pp}.interval: need two endpoints")
        formula = _take(table, f"{pp}.formula", required=True)
        try:
            e = parse(str(formula))
        except FormulaError as err:
            raise SpecValidationError(f"{pp}.formula: {err}") from None
        pieces.append((interval[0], interval[1], e))
        i += 1
    if not pieces:
        raise SpecValidationError("payoff.piece.1.formula: at least one payoff "
                                  "piece is required")
    if pieces[0][0] != d.lower or pieces[-1][1] != d.upper:
        raise SpecValidationError(
            "payoff.piece.*: pieces must cover the state interval "
            f"[{d.lower}, {d.upper}]")
    try:
        g = PiecewiseFunction(pieces)
    except ValueError as e:
        raise SpecValidationError(f"payoff.piece.*: {e}") from None

    rho = _num(_take(table, "discount.rho", required=True), "discount.rho")
    if rho < 0.0:
        raise SpecValidationError("discount.rho: must be nonnegative")

    x_query = tuple(_num_list(_take(table, "analysis.x_query", ""), "analysis.x_query"))
    x_ref_raw = _take(table, "analysis.x_ref")
    x_ref = _num(x_ref_raw, "analysis.x_ref") if x_ref_raw is not None else None
    gp_raw = _take(table, "analysis.grid_points")
    grid_points = _int(gp_raw, "analysis.grid_points") if gp_raw is not None else None

    mc = None
    mc_keys = [k for k in table if k.startswith("mc.")]
    if mc_keys:
        try:
            mc = McConfig(
                n_paths=_int(_take(table, "mc.n_paths", required=True), "mc.n_paths"),
                dt=_num(_take(table, "mc.dt", required=True), "mc.dt"),
                t_max=_num(_take(table, "mc.t_max", required=True), "mc.t_max"),
                seed=_int(_take(table, "mc.seed", required=True), "mc.seed"),
                antithetic=_bool(_take(table, "mc.antithetic", "false"),
                                 "mc.antithetic"),
                n_workers=_int(_take(table, "mc.n_workers", "1"), "mc.n_workers"),
            )
        except ValueError as e:
            if isinstance(e, SpecValidationError):
                raise
            raise SpecValidationError(f"mc.*: {e}") from None

    if table:
        raise SpecValidationError(f"unknown field {sorted(table)[0]!r}")

    return ProblemSpec(diffusion=d, payoff=g, rho=rho, x_query=x_query,
                       x_ref=x_ref, grid_points=grid_points, mc=mc, echo=echo)
