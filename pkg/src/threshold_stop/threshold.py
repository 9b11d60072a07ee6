"""Threshold-rule machinery: the ratio h = g/psi and everything built on it.

Stopping at the first time the process reaches level p has value
h(p) psi(x) below p and g(x) at or above p, provided the left-end
condition holds.  Optimizing over thresholds is therefore maximizing h.
This module builds h with one-sided derivatives at payoff knots, locates
its maximum (with grid extension when the supremum sits at the right
boundary), evaluates the two-sided exit value, and runs the
optimal-in-class / semi-interval-continuation condition checks and the
smooth-pasting check at a candidate threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (DiffusionSpec, FundamentalPair, default_grid,
                        insert_points, left_end_condition)
from .expr import PiecewiseFunction

INF = float("inf")

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
MAX_DOUBLINGS = 8
UNBOUNDED_GROWTH_FACTOR = 10.0
WEAK_TOL = 1e-12       # relative, scaled by 1 + |h(p*)|
STRICT_WINDOW = 1e-6   # points this close to p* are exempt from strictness


class LeftEndNotEstablishedError(RuntimeError):
    """The one-sided value representation requires the left-end condition."""


class DegenerateBracketError(ValueError):
    """Two-sided exit formula denominator vanished."""


@dataclass
class Verdict:
    """Outcome of a single inequality check with its witness and tolerance."""

    passed: bool
    witness: float | None = None
    margin: float | None = None
    tolerance: float = 0.0

    def as_dict(self):
        return {"passed": self.passed, "witness": self.witness,
                "margin": self.margin, "tolerance": self.tolerance}


@dataclass
class ThresholdFunction:
    """h = g/psi with first and second derivatives, sampled on a grid."""

    fp: FundamentalPair
    payoff: PiecewiseFunction
    grid: np.ndarray
    left_end: str = "undetermined"

    def h(self, p):
        return self.payoff.value(p) / self.fp.psi(p)

    def h1(self, p, side="right"):
        g1 = self.payoff.one_sided(p, side, 1) if np.ndim(p) == 0 \
            else self.payoff.deriv1(p)
        return (g1 - self.h(p) * self.fp.psi1(p)) / self.fp.psi(p)

    def h2(self, p, side="right"):
        if np.ndim(p) == 0:
            g2 = self.payoff.one_sided(p, side, 2)
        else:
            g2 = self.payoff.deriv2(p)
        return (g2 - 2.0 * self.h1(p, side) * self.fp.psi1(p)
                - self.h(p) * self.fp.psi2(p)) / self.fp.psi(p)

    def h_piece(self, i, p, order=0):
        """h and derivatives using piece i's payoff expression; smooth on the
        closure of the piece, which makes it safe for root brackets."""
        g0 = self.payoff.piece_eval(i, p, 0)
        h0 = g0 / self.fp.psi(p)
        if order == 0:
            return h0
        g1 = self.payoff.piece_eval(i, p, 1)
        h1 = (g1 - h0 * self.fp.psi1(p)) / self.fp.psi(p)
        if order == 1:
            return h1
        g2 = self.payoff.piece_eval(i, p, 2)
        return (g2 - 2.0 * h1 * self.fp.psi1(p) - h0 * self.fp.psi2(p)) \
            / self.fp.psi(p)

    def h_table(self):
        """Columns p, h, h1, h2 on the grid (right-sided at knots)."""
        g = self.grid
        return np.column_stack([g, self.h(g), self.h1(g), self.h2(g)])

    def value_curve(self):
        """V on the grid: psi(x) * max(h(x), sup over grid p > x of h(p))."""
        h = self.h(self.grid)
        suffix = np.maximum.accumulate(h[::-1])[::-1]
        return self.fp.psi(self.grid) * suffix

    def value_at(self, x, p_star=None):
        """V(x) = max(g(x), psi(x) * sup over thresholds p > x of h(p))."""
        h = self.h(self.grid)
        mask = self.grid > x
        best = np.max(h[mask]) if mask.any() else -INF
        if p_star is not None and p_star > x:
            best = max(best, self.h(p_star))
        return max(self.payoff.value(x), self.fp.psi(x) * best)


def build_threshold_function(d: DiffusionSpec, fp: FundamentalPair,
                             g: PiecewiseFunction, grid=None,
                             n_points=None, left_end=None) -> ThresholdFunction:
    """Assemble h on the default grid (payoff knots inserted exactly)."""
    if grid is None:
        n = n_points or 2001
        grid = default_grid(d.lower, d.upper, fp.x_ref, n=n,
                            length_scale=d.length_scale())
    grid = insert_points(np.asarray(grid, dtype=float), g.breakpoints)
    if left_end is None:
        left_end = left_end_condition(d, fp, g)
    return ThresholdFunction(fp=fp, payoff=g, grid=grid, left_end=left_end)


# ---------------------------------------------------------------------------
# Values

def two_sided_value(fp: FundamentalPair, g: PiecewiseFunction,
                    x: float, a: float, p: float) -> float:
    """Expected discounted payoff of exiting ]a, p[ starting from x.

    Weights the payoff at each endpoint by the usual psi/phi cross ratios.
    x = a or x = p degenerate to immediate exit.
    """
    if not (a <= x <= p):
        raise ValueError("need a <= x <= p")
    psi_a, psi_x, psi_p = fp.psi(a), fp.psi(x), fp.psi(p)
    phi_a, phi_x, phi_p = fp.phi(a), fp.phi(x), fp.phi(p)
    den = psi_a * phi_p - psi_p * phi_a
    if abs(den) < 1e-14:
        raise DegenerateBracketError(
            f"two-sided weights degenerate for a={a}, p={p} (denominator {den})")
    u1 = (psi_x * phi_p - psi_p * phi_x) / den
    u2 = (psi_a * phi_x - psi_x * phi_a) / den
    return g.value(a) * u1 + g.value(p) * u2


def value_threshold(fp: FundamentalPair, g: PiecewiseFunction,
                    x: float, p: float, left_end: str | None = None) -> float:
    """Value of the stop-at-threshold-p rule started from x.

    Requires the left-end condition verdict 'holds'; the one-sided
    representation h(p) psi(x) is not valid otherwise.
    """
    if left_end != "holds":
        raise LeftEndNotEstablishedError(
            "value_threshold requires the left-end condition; got "
            f"{left_end!r}. Run left_end_condition first and pass its verdict.")
    if x >= p:
        return float(g.value(x))
    return float(g.value(p) / fp.psi(p) * fp.psi(x))


# ---------------------------------------------------------------------------
# Maximization of h

@dataclass
class HMaximum:
    """Outcome of maximizing h over thresholds.

    status 'attained_interior': p_star holds the refined interior maximizer.
    status 'sup_at_boundary': the supremum sits at an endpoint (side 'right'
    or 'left'); unbounded is True when h kept growing by more than a factor
    of UNBOUNDED_GROWTH_FACTOR across rightward grid extensions, else
    limit_estimate holds the last observed value.  truncation_radius records
    how far the search actually looked.  A left-side supremum (payoff ratio
    blowing up toward the unreachable left endpoint) means no single
    threshold is optimal from every starting point.
    """

    status: str
    p_star: float | None = None
    h_value: float | None = None
    limit_estimate: float | None = None
    unbounded: bool = False
    truncation_radius: float = 0.0
    side: str = "right"


def _golden_max(f, a, b, tol):
    c = b - GOLDEN * (b - a)
    d_ = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d_)
    while (b - a) > tol:
        if fc > fd:
            b, d_, fd = d_, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d_, fd
            d_ = a + GOLDEN * (b - a)
            fd = f(d_)
    return 0.5 * (a + b)


def maximize_h(tf: ThresholdFunction, max_doublings: int = MAX_DOUBLINGS) -> HMaximum:
    """Locate the supremum of h over the (truncated) threshold range.

    Grid argmax with golden-section refinement for interior maxima; the
    grid is extended rightward by doubling (up to max_doublings times,
    only on domains unbounded to the right) while h is still increasing at
    the right end.  Ties break toward the smaller threshold.
    """
    grid = tf.grid
    h = tf.h(grid)
    r_is_inf = tf.fp.upper == INF
    doubled = 0
    h_end_initial = h[-1]
    while np.argmax(h) == len(h) - 1 and r_is_inf and doubled < max_doublings:
        tail = np.geomspace(grid[-1], 2.0 * grid[-1], 257)[1:] \
            if grid[0] > 0 else np.linspace(grid[-1], 2.0 * grid[-1], 257)[1:]
        grid = np.concatenate([grid, tail])
        h = np.concatenate([h, tf.h(tail)])
        doubled += 1

    i = int(np.argmax(h))  # np.argmax returns the first max: smaller-p tie-break
    radius = float(grid[-1])
    if i == len(h) - 1:
        unbounded = bool(h[-1] > UNBOUNDED_GROWTH_FACTOR * h_end_initial > 0)
        return HMaximum(status="sup_at_boundary",
                        limit_estimate=None if unbounded else float(h[-1]),
                        unbounded=unbounded, truncation_radius=radius)
    if i == 0:
        # ratio peaks toward the (unreachable) left endpoint: the supremum is
        # not attained and grows as the threshold shrinks
        return HMaximum(status="sup_at_boundary", side="left",
                        limit_estimate=float(h[0]), truncation_radius=radius)

    lo = grid[i - 1]
    hi = grid[i + 1]
    p_star = _golden_max(tf.h, lo, hi, tol=1e-9 * (1.0 + abs(grid[i])))
    if tf.h(p_star) < h[i]:
        p_star = float(grid[i])
    return HMaximum(status="attained_interior", p_star=float(p_star),
                    h_value=float(tf.h(p_star)), truncation_radius=radius)


# ---------------------------------------------------------------------------
# Condition checks at a candidate threshold

def left_dominance(tf: ThresholdFunction, p_star: float) -> tuple[Verdict, Verdict]:
    """Weak and strict dominance of h(p_star) over h on thresholds below.

    Weak: h(p) <= h(p*) + tol for all grid p < p*.  Strict additionally
    requires h(p*) - h(p) > tol except within STRICT_WINDOW of p*.
    """
    h_star = tf.h(p_star)
    tol = WEAK_TOL * (1.0 + abs(h_star))
    left = tf.grid[tf.grid < p_star]
    if len(left) == 0:
        return (Verdict(True, tolerance=tol), Verdict(True, tolerance=tol))
    h_left = tf.h(left)
    gaps = h_left - h_star
    worst = int(np.argmax(gaps))
    weak = Verdict(bool(gaps[worst] <= tol),
                   witness=None if gaps[worst] <= tol else float(left[worst]),
                   margin=float(gaps[worst]), tolerance=tol)
    sel = left < p_star - STRICT_WINDOW
    if sel.any():
        closest = int(np.argmin(h_star - h_left[sel]))
        shortfall = (h_star - h_left[sel])[closest]
        strict_ok = weak.passed and bool(shortfall > tol)
        strict = Verdict(strict_ok,
                         witness=None if strict_ok else float(left[sel][closest]),
                         margin=float(shortfall), tolerance=tol)
    else:
        strict = Verdict(weak.passed, tolerance=tol)
    return weak, strict


def right_nonincreasing(tf: ThresholdFunction, p_star: float) -> Verdict:
    """h must not increase across successive grid points above p_star."""
    h_star = tf.h(p_star)
    tol = WEAK_TOL * (1.0 + abs(h_star))
    right = tf.grid[tf.grid > p_star]
    pts = np.concatenate([[p_star], right])
    h_vals = tf.h(pts)
    diffs = np.diff(h_vals)
    if len(diffs) == 0:
        return Verdict(True, tolerance=tol)
    worst = int(np.argmax(diffs))
    ok = bool(diffs[worst] <= tol)
    return Verdict(ok, witness=None if ok else float(pts[worst + 1]),
                   margin=float(diffs[worst]), tolerance=tol)


@dataclass
class ThresholdClassOptimality:
    """Verdicts for optimality of a threshold rule within the threshold class.

    weak: the rule at p_star beats every other threshold rule.
    strict: additionally, the continuation region is exactly the states
    below p_star (strict dominance on the left).
    """

    weak: Verdict
    strict: Verdict


def check_threshold_optimality(tf: ThresholdFunction, p_star: float) -> ThresholdClassOptimality:
    """Necessary-and-sufficient condition pair at a candidate threshold."""
    weak_left, strict_left = left_dominance(tf, p_star)
    right = right_nonincreasing(tf, p_star)
    weak = Verdict(weak_left.passed and right.passed,
                   witness=weak_left.witness if not weak_left.passed else right.witness,
                   margin=weak_left.margin, tolerance=weak_left.tolerance)
    strict = Verdict(strict_left.passed and right.passed,
                     witness=(strict_left.witness if not strict_left.passed
                              else right.witness),
                     margin=strict_left.margin, tolerance=strict_left.tolerance)
    return ThresholdClassOptimality(weak=weak, strict=strict)


@dataclass
class PastingResult:
    """Comparison of the value slope and the payoff slope at the threshold.

    status 'smooth': the classical equality V'(p*) = g'(p*) holds and g is
    differentiable there; 'one_sided_chain': g has a kink at p* but
    g'(p*+0) <= V'(p*-0) <= g'(p*-0) holds; 'fail' otherwise.
    """

    status: str
    value_slope: float
    payoff_slope_left: float
    payoff_slope_right: float
    tolerance: float


def smooth_pasting_check(fp: FundamentalPair, g: PiecewiseFunction,
                         p_star: float) -> PastingResult:
    h_star = g.value(p_star) / fp.psi(p_star)
    v_slope = h_star * fp.psi1(p_star)
    gl = g.one_sided(p_star, "left", 1)
    gr = g.one_sided(p_star, "right", 1)
    tol = 1e-6 * (1.0 + max(abs(gl), abs(gr)))
    differentiable = abs(gl - gr) <= 1e-12 * (1.0 + max(abs(gl), abs(gr)))
    if differentiable and abs(v_slope - gr) <= tol:
        status = "smooth"
    elif gr <= v_slope + tol and v_slope <= gl + tol:
        status = "one_sided_chain"
    else:
        status = "fail"
    return PastingResult(status=status, value_slope=float(v_slope),
                         payoff_slope_left=float(gl), payoff_slope_right=float(gr),
                         tolerance=tol)


# ---------------------------------------------------------------------------
# Bundled analysis

@dataclass
class ThresholdAnalysis:
    """Everything the threshold-class analysis produces for one problem."""

    maximum: HMaximum
    class_optimality: ThresholdClassOptimality | None
    pasting: PastingResult | None
    continuation: tuple  # ("semi_interval", l, p*) or ("not_semi_interval", witness)
    values: dict = field(default_factory=dict)

    @property
    def p_star(self):
        return self.maximum.p_star


def analyze_threshold(d: DiffusionSpec, fp: FundamentalPair, g: PiecewiseFunction,
                      grid=None, n_points=None, x_query=()) -> ThresholdAnalysis:
    """Run maximize-h, condition checks, pasting, and value queries."""
    tf = build_threshold_function(d, fp, g, grid=grid, n_points=n_points)
    if tf.left_end != "holds":
        raise LeftEndNotEstablishedError(
            f"left-end condition verdict is {tf.left_end!r}")
    mx = maximize_h(tf)
    if mx.status != "attained_interior":
        return ThresholdAnalysis(maximum=mx, class_optimality=None, pasting=None,
                                 continuation=("undetermined",),
                                 values={float(x): tf.value_at(x) for x in x_query})
    opt = check_threshold_optimality(tf, mx.p_star)
    pasting = smooth_pasting_check(fp, g, mx.p_star)
    if opt.strict.passed:
        continuation = ("semi_interval", fp.lower, mx.p_star)
    else:
        continuation = ("not_semi_interval", opt.strict.witness)
    values = {float(x): tf.value_at(x, p_star=mx.p_star) for x in x_query}
    return ThresholdAnalysis(maximum=mx, class_optimality=opt, pasting=pasting,
                             continuation=continuation, values=values)
