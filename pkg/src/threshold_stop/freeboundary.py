"""Free-boundary solutions and optimality certificates.

A free-boundary solution is a pair (U, p*) with L U = rho U below p*,
value matching U(p*) = g(p*), and smooth pasting U'(p*) = g'(p*).  Under
the left-end condition every such solution has the form
U = h(p*) psi with h'(p*) = 0, so solving the system reduces to locating
stationary points of h.  Stationary points need not be maxima: the
second-order comparison of U''(p*-0) with g''(p*) discards solutions that
are local minima of the threshold value in p, and the certificate battery
(dominance of lower thresholds, the pasting inequality, and the generator
bound on the stopping side) certifies optimality over all stopping times
and, in the strict case, that the continuation set is exactly the states
below the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .diffusion import DiffusionSpec, FundamentalPair
from .expr import Num, PiecewiseFunction, Sub, Var
from .threshold import (LeftEndNotEstablishedError, ThresholdFunction, Verdict,
                        build_threshold_function, left_dominance,
                        right_nonincreasing)

GRID_H1_ZERO_TOL = 1e-12
ROOT_XTOL = 1e-10
DEDUPE_REL = 1e-7
CLASSIFY_REL = 1e-9
COND_REL = 1e-9


def _stationarity_tol(tf, q):
    return 1e-8 * (1.0 + abs(tf.h(q)) / (1.0 + q))


def _stationary_points(tf: ThresholdFunction, lo=None, hi=None):
    """Stationary points of h in [lo, hi]: simple sign changes of h' plus
    degenerate touch zeros located through sign changes of h''.

    Root finding runs piece by piece so payoff kinks never masquerade as
    stationary points.  A grid |h'| below GRID_H1_ZERO_TOL also qualifies.
    """
    grid = tf.grid
    lo = grid[0] if lo is None else max(lo, grid[0])
    hi = grid[-1] if hi is None else min(hi, grid[-1])
    found = []

    for i, (plo, phi_, *_rest) in enumerate(tf.payoff.pieces):
        a = max(lo, plo)
        b = min(hi, phi_)
        if not a < b:
            continue
        sub = grid[(grid >= a) & (grid <= b)]
        if len(sub) < 3:
            sub = np.linspace(a, b, 9)
        h1 = tf.h_piece(i, sub, 1)
        sign = np.sign(h1)
        for j in range(len(sub) - 1):
            if sign[j] == 0.0:
                if abs(h1[j]) < GRID_H1_ZERO_TOL:
                    found.append(float(sub[j]))
                continue
            if sign[j + 1] != 0.0 and sign[j] != sign[j + 1]:
                root = brentq(lambda p: tf.h_piece(i, p, 1),
                              sub[j], sub[j + 1], xtol=ROOT_XTOL)
                found.append(float(root))
        if abs(h1[-1]) < GRID_H1_ZERO_TOL:
            found.append(float(sub[-1]))
        # degenerate zeros: h' touches zero where h'' crosses it
        h2 = tf.h_piece(i, sub, 2)
        s2 = np.sign(h2)
        for j in range(len(sub) - 1):
            if s2[j] != 0.0 and s2[j + 1] != 0.0 and s2[j] != s2[j + 1]:
                q = brentq(lambda p: tf.h_piece(i, p, 2),
                           sub[j], sub[j + 1], xtol=ROOT_XTOL)
                if abs(tf.h_piece(i, q, 1)) <= _stationarity_tol(tf, q):
                    found.append(float(q))

    found.sort()
    out = []
    for p in found:
        if out and abs(p - out[-1]) <= DEDUPE_REL * (1.0 + abs(p)):
            continue
        out.append(p)
    return out


@dataclass
class FBSolution:
    """One candidate (U, p*) with its second-order classification.

    multiplier is the payoff-to-psi ratio at p*, so on the continuation
    side U(x) = multiplier * psi(x).  gap = g''(p*) - U''(p*-0) when the
    payoff is twice differentiable at p* (None otherwise); the identity
    psi(p*) h''(p*) = gap ties it to the curvature of h, and a genuine
    candidate (a local maximum of the threshold value in p) has gap < 0.
    """

    p_star: float
    multiplier: float
    second_order: str
    gap: float | None
    u_pp_left: float
    g_pp: float | None
    stationarity_residual: float
    value_match_residual: float
    fp: FundamentalPair = field(repr=False, default=None)

    def u(self, x):
        return self.multiplier * self.fp.psi(x)

    def u1(self, x):
        return self.multiplier * self.fp.psi1(x)

    def u2(self, x):
        return self.multiplier * self.fp.psi2(x)

    def as_dict(self):
        return {"p_star": self.p_star, "multiplier": self.multiplier,
                "second_order": self.second_order, "gap": self.gap,
                "u_pp_left": self.u_pp_left, "g_pp": self.g_pp,
                "stationarity_residual": self.stationarity_residual,
                "stationarity_tolerance": 1e-8 * (1.0 + abs(self.multiplier)
                                                  / (1.0 + self.p_star)),
                "value_match_residual": self.value_match_residual,
                "value_match_tolerance": 1e-9 * (1.0 + abs(self.multiplier
                                                           * self.fp.psi(self.p_star)))}


def classify_second_order(p_star: float, g: PiecewiseFunction,
                          fp: FundamentalPair) -> tuple[str, float | None, float, float | None]:
    """Compare U''(p*-0) with g''(p*).

    Returns (label, gap, u_pp_left, g_pp).  label 'local_max' when
    U'' > g'' (the candidate is a strict local maximum of the threshold
    value in p), 'local_min' when U'' < g'' (discard it), 'inconclusive'
    when they agree within tolerance or g'' is undefined at p*.
    """
    multiplier = g.value(p_star) / fp.psi(p_star)
    u_pp = multiplier * fp.psi2(p_star)
    if g.has_knot_at(p_star):
        return "inconclusive", None, float(u_pp), None
    g_pp = g.one_sided(p_star, "right", 2)
    scale = CLASSIFY_REL * (1.0 + max(abs(u_pp), abs(g_pp)))
    if u_pp > g_pp + scale:
        label = "local_max"
    elif u_pp < g_pp - scale:
        label = "local_min"
    else:
        label = "inconclusive"
    return label, float(g_pp - u_pp), float(u_pp), float(g_pp)


def solve_fb(tf: ThresholdFunction) -> list[FBSolution]:
    """All free-boundary solutions on the grid range, sorted by threshold.

    Every stationary point of h yields one solution (smooth pasting at p*
    is equivalent to h'(p*) = 0); the list may be empty.
    """
    if tf.left_end != "holds":
        raise LeftEndNotEstablishedError(
            f"solve_fb requires the left-end condition; verdict is {tf.left_end!r}")
    out = []
    for q in _stationary_points(tf):
        multiplier = float(tf.h(q))
        label, gap, u_pp, g_pp = classify_second_order(q, tf.payoff, tf.fp)
        side = "left" if tf.payoff.has_knot_at(q) else "right"
        resid = abs(tf.h1(q, side=side))
        vm = abs(multiplier * tf.fp.psi(q) - tf.payoff.value(q))
        out.append(FBSolution(p_star=q, multiplier=multiplier, second_order=label,
                              gap=gap, u_pp_left=u_pp, g_pp=g_pp,
                              stationarity_residual=float(resid),
                              value_match_residual=float(vm), fp=tf.fp))
    return out


# ---------------------------------------------------------------------------
# Optimality certificates

@dataclass
class OptimalityCertificate:
    """Condition battery at a candidate threshold.

    left_dominance: no lower threshold does better (h(p) <= h(p*) below).
    pasting_inequality: psi'(p*) g(p*) >= psi(p*) g'(p*+0).
    stopping_generator_bound: L g <= rho g at grid points above p* (up to
    the recorded truncation radius).
    strict_left_dominance: the strict version of left_dominance.

    overall:
      'optimal_all_stopping_times'  - the three core conditions hold, so
        stopping at p* is optimal over all stopping times;
      'continuation_semi_interval'  - additionally strict dominance holds
        and no unresolved candidate sits below p*, so the continuation set
        is exactly the states below p*;
      'necessary_fail'              - a core condition fails; since the
        conditions are also necessary, p* is certified non-optimal;
      'inconclusive'                - a payoff kink above p* violates the
        smoothness hypothesis, so neither direction applies.
    """

    left_dominance: Verdict
    pasting_inequality: Verdict
    stopping_generator_bound: Verdict
    strict_left_dominance: Verdict
    overall: str
    witness: float | None = None
    truncation_radius: float = 0.0
    caveats: tuple = ()

    def core_passed(self):
        return (self.left_dominance.passed and self.pasting_inequality.passed
                and self.stopping_generator_bound.passed)

    def as_dict(self):
        return {
            "left_dominance": self.left_dominance.as_dict(),
            "pasting_inequality": self.pasting_inequality.as_dict(),
            "stopping_generator_bound": self.stopping_generator_bound.as_dict(),
            "strict_left_dominance": self.strict_left_dominance.as_dict(),
            "overall": self.overall,
            "witness": self.witness,
            "truncation_radius": self.truncation_radius,
            "caveats": list(self.caveats),
        }


def _pasting_inequality(fp, g, p_star):
    lhs = fp.psi1(p_star) * g.value(p_star)
    rhs = fp.psi(p_star) * g.one_sided(p_star, "right", 1)
    tol = COND_REL * (1.0 + max(abs(lhs), abs(rhs)))
    return Verdict(bool(lhs >= rhs - tol), witness=None if lhs >= rhs - tol else p_star,
                   margin=float(lhs - rhs), tolerance=tol)


def _generator_bound(tf, d, rho, p_star):
    """L g <= rho g pointwise on grid points above p_star, piece by piece."""
    grid = tf.grid[tf.grid > p_star]
    worst_excess = -math.inf
    worst_p = None
    ok = True
    for i, (plo, phi_, *_rest) in enumerate(tf.payoff.pieces):
        a, b = max(p_star, plo), phi_
        if not a < b:
            continue
        pts = grid[(grid >= a) & (grid <= b)]
        pts = np.unique(np.concatenate([pts, [v for v in (a, b)
                                              if grid.size and grid[0] <= v <= grid[-1]
                                              and v > p_star]]))
        if len(pts) == 0:
            continue
        g0 = tf.payoff.piece_eval(i, pts, 0)
        g1 = tf.payoff.piece_eval(i, pts, 1)
        g2 = tf.payoff.piece_eval(i, pts, 2)
        lg = np.asarray(d.drift_at(pts), dtype=float) * g1 \
            + 0.5 * np.asarray(d.vol_at(pts), dtype=float) ** 2 * g2
        rg = rho * g0
        tol = COND_REL * (1.0 + np.maximum(np.abs(lg), np.abs(rg)))
        excess = lg - rg - tol
        j = int(np.argmax(excess))
        if excess[j] > worst_excess:
            worst_excess = float(excess[j])
            worst_p = float(pts[j])
            worst_margin = float((lg - rg)[j])
            worst_tol = float(tol[j])
        if np.any(excess > 0.0):
            ok = False
    if worst_p is None:
        return Verdict(True, tolerance=0.0)
    return Verdict(ok, witness=None if ok else worst_p,
                   margin=worst_margin, tolerance=worst_tol)


def _unresolved_below(tf, p_star):
    """Stationary points below p_star whose second-order test is inconclusive."""
    cutoff = p_star - 1e-6 * (1.0 + abs(p_star))
    unresolved = []
    for q in _stationary_points(tf, hi=cutoff):
        label, *_rest = classify_second_order(q, tf.payoff, tf.fp)
        if label == "inconclusive":
            unresolved.append(q)
    return unresolved


def _tail_vanishes(tf):
    """Grid-tail proxy for limsup of max(0, h) at the right endpoint."""
    k = max(2, len(tf.grid) // 20)
    tail = np.maximum(0.0, tf.h(tf.grid[-k:]))
    return bool(np.max(tail) <= 1e-8 * (1.0 + abs(tf.h(tf.grid[0]))))


def _compose_certificate(tf, verdicts, p_star, hypothesis_violation, caveats):
    weak, pasting, genbound, strict = verdicts
    caveats = list(caveats)
    radius = float(tf.grid[-1])
    caveats.append(f"stopping-side generator bound swept up to p = {radius:g}")
    if not _tail_vanishes(tf):
        caveats.append("h does not vanish at the right grid tail; necessity of the "
                       "semi-interval continuation claim is asserted only up to the "
                       "truncation radius")
    witness = None
    if not (weak.passed and pasting.passed and genbound.passed):
        for v in (weak, pasting, genbound):
            if not v.passed:
                witness = v.witness
                break
        # A lower threshold doing strictly better rules the candidate out with
        # no smoothness hypothesis (optimality over all stopping times implies
        # optimality within the threshold class); the other two conditions are
        # necessary only when the payoff is smooth above the threshold.
        if not weak.passed:
            overall = "necessary_fail"
        elif hypothesis_violation:
            overall = "inconclusive"
            caveats.append("a condition fails but the payoff has a kink above the "
                           "threshold, so non-optimality cannot be certified")
        else:
            overall = "necessary_fail"
    elif hypothesis_violation:
        overall = "inconclusive"
    else:
        unresolved = _unresolved_below(tf, p_star)
        if strict.passed and not unresolved:
            overall = "continuation_semi_interval"
        else:
            overall = "optimal_all_stopping_times"
            if strict.passed and unresolved:
                caveats.append(
                    "semi-interval continuation claim withheld: stationary "
                    f"point(s) at {', '.join(f'{q:g}' for q in unresolved)} below the "
                    "threshold have an inconclusive second-order test")
    return OptimalityCertificate(
        left_dominance=weak, pasting_inequality=pasting,
        stopping_generator_bound=genbound, strict_left_dominance=strict,
        overall=overall, witness=witness, truncation_radius=radius,
        caveats=tuple(caveats))


def certify_optimality(tf: ThresholdFunction, d: DiffusionSpec, rho: float,
                       p_star: float) -> OptimalityCertificate:
    """Run the full condition battery at a candidate threshold.

    The conditions are sufficient and (given payoff smoothness above the
    threshold) necessary, so a failing core condition certifies
    non-optimality.  A payoff kink strictly above p_star violates the
    smoothness hypothesis: the conditions are still evaluated piecewise
    but the verdict degrades to 'inconclusive' with a caveat.
    """
    caveats = []
    knots_above = [q for q in tf.payoff.breakpoints
                   if q > p_star + 1e-9 * (1.0 + abs(p_star))]
    hypothesis_violation = bool(knots_above)
    if hypothesis_violation:
        caveats.append("payoff kink(s) above the threshold at "
                       + ", ".join(f"{q:g}" for q in knots_above)
                       + "; generator bound evaluated piecewise")
    weak, strict = left_dominance(tf, p_star)
    pasting = _pasting_inequality(tf.fp, tf.payoff, p_star)
    genbound = _generator_bound(tf, d, rho, p_star)
    return _compose_certificate(tf, (weak, pasting, genbound, strict),
                                p_star, hypothesis_violation, caveats)


def certify_linear_payoff(d: DiffusionSpec, fp: FundamentalPair, rho: float,
                          c: float, p_star: float) -> OptimalityCertificate:
    """Certificate for the payoff x - c, with the generator bound expressed
    directly through the drift: a(p) <= rho (p - c) above the threshold."""
    g = PiecewiseFunction([(d.lower, d.upper, Sub(Var(), Num(float(c))))])
    tf = build_threshold_function(d, fp, g)
    if tf.left_end != "holds":
        raise LeftEndNotEstablishedError(
            f"left-end condition verdict is {tf.left_end!r}")
    weak, strict = left_dominance(tf, p_star)

    lhs = fp.psi1(p_star) * (p_star - c)
    rhs = fp.psi(p_star)
    tol = COND_REL * (1.0 + max(abs(lhs), abs(rhs)))
    pasting = Verdict(bool(lhs >= rhs - tol),
                      witness=None if lhs >= rhs - tol else p_star,
                      margin=float(lhs - rhs), tolerance=tol)

    pts = tf.grid[tf.grid > p_star]
    a_vals = np.asarray(d.drift_at(pts), dtype=float)
    bound = rho * (pts - c)
    tols = COND_REL * (1.0 + np.maximum(np.abs(a_vals), np.abs(bound)))
    excess = a_vals - bound - tols
    if len(pts) == 0:
        genbound = Verdict(True, tolerance=0.0)
    else:
        j = int(np.argmax(excess))
        ok = bool(excess[j] <= 0.0)
        genbound = Verdict(ok, witness=None if ok else float(pts[j]),
                           margin=float((a_vals - bound)[j]), tolerance=float(tols[j]))
    return _compose_certificate(tf, (weak, pasting, genbound, strict),
                                p_star, False, [])


@dataclass
class TailCheck:
    status: str  # "consistent" | "violation"
    witness: float | None = None


def monotone_tail_check(tf: ThresholdFunction, p_star: float) -> TailCheck:
    """h must be nonincreasing above a certified threshold; a violation
    flags numerical inconsistency (it cannot happen when the certified
    conditions actually hold)."""
    v = right_nonincreasing(tf, p_star)
    return TailCheck(status="consistent" if v.passed else "violation",
                     witness=v.witness)
