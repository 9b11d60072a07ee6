import numpy as np
import pytest

import threshold_stop as ts
from threshold_stop.threshold import (DegenerateBracketError,
                                      LeftEndNotEstablishedError,
                                      left_dominance, right_nonincreasing)

INF = float("inf")


class TestTwoSidedValue:
    def test_exit_at_lower_end(self, ex1_d4):
        v = ts.two_sided_value(ex1_d4.fp, ex1_d4.g, x=0.5, a=0.5, p=4.0)
        assert v == pytest.approx(ex1_d4.g.value(0.5), rel=1e-12)

    def test_exit_at_upper_end(self, ex1_d4):
        v = ts.two_sided_value(ex1_d4.fp, ex1_d4.g, x=4.0, a=0.5, p=4.0)
        assert v == pytest.approx(ex1_d4.g.value(4.0), rel=1e-12)

    def test_shrinking_lower_end_recovers_threshold_value(self, ex1_d4):
        # with a near the left endpoint this approaches h(4) psi(1) = 283/256
        v = ts.two_sided_value(ex1_d4.fp, ex1_d4.g, x=1.0, a=0.01, p=4.0)
        assert v == pytest.approx(283.0 / 256.0, abs=1e-3)

    def test_degenerate_bracket(self, ex1_d4):
        with pytest.raises(DegenerateBracketError):
            ts.two_sided_value(ex1_d4.fp, ex1_d4.g, x=1.0, a=1.0 - 1e-16,
                               p=1.0 + 1e-16)


class TestValueThreshold:
    def test_above_threshold_pays_immediately(self, ex2):
        assert ts.value_threshold(ex2.fp, ex2.g, 20.0, 18.0, left_end=ex2.left) \
            == pytest.approx(ex2.g.value(20.0), rel=1e-14)

    def test_two_piece_value_at_nine(self, ex2):
        v = ts.value_threshold(ex2.fp, ex2.g, 9.0, 18.0, left_end=ex2.left)
        assert v == pytest.approx(306.0, rel=1e-12)

    def test_cubic_power_value(self, ex1_d4):
        v = ts.value_threshold(ex1_d4.fp, ex1_d4.g, 1.0, 4.0, left_end=ex1_d4.left)
        assert v == pytest.approx(283.0 / 256.0, rel=1e-12)

    def test_refuses_without_left_end(self, ex2):
        with pytest.raises(LeftEndNotEstablishedError):
            ts.value_threshold(ex2.fp, ex2.g, 9.0, 18.0)
        with pytest.raises(LeftEndNotEstablishedError):
            ts.value_threshold(ex2.fp, ex2.g, 9.0, 18.0, left_end="undetermined")

    def test_agrees_with_two_sided_at_small_a(self, ex2):
        direct = ts.value_threshold(ex2.fp, ex2.g, 9.0, 18.0, left_end=ex2.left)
        bracket = ts.two_sided_value(ex2.fp, ex2.g, x=9.0, a=1e-3, p=18.0)
        assert bracket == pytest.approx(direct, abs=1e-3 * (1 + abs(direct)))


class TestMaximizeH:
    def test_interior_maximum_quartic(self, ex1_d4):
        mx = ts.maximize_h(ex1_d4.tf)
        assert mx.status == "attained_interior"
        assert mx.p_star == pytest.approx(4.0, abs=1e-6)
        assert mx.h_value == pytest.approx(283.0 / 256.0, rel=1e-9)

    def test_unbounded_growth(self, ex1_d2):
        mx = ts.maximize_h(ex1_d2.tf)
        assert mx.status == "sup_at_boundary"
        assert mx.unbounded
        assert mx.limit_estimate is None

    def test_finite_unattained_supremum(self, ex1_d3):
        mx = ts.maximize_h(ex1_d3.tf)
        assert mx.status == "sup_at_boundary"
        assert not mx.unbounded
        assert 1.99 <= mx.limit_estimate <= 2.01

    def test_two_piece_maximum(self, ex2):
        mx = ts.maximize_h(ex2.tf)
        assert mx.status == "attained_interior"
        assert mx.p_star == pytest.approx(18.0, abs=1e-4)
        assert mx.h_value == pytest.approx(34.0 / 9.0, rel=1e-9)


class TestConditionChecks:
    def test_two_piece_at_true_threshold(self, ex2):
        res = ts.check_threshold_optimality(ex2.tf, 18.0)
        assert res.weak.passed and res.strict.passed

    def test_two_piece_at_spurious_threshold(self, ex2):
        res = ts.check_threshold_optimality(ex2.tf, 1.0)
        assert not res.weak.passed and not res.strict.passed
        assert res.weak.witness is not None and res.weak.witness < 1.0
        # e.g. h(0.5) = 1.25 > h(1) = 1
        assert ex2.tf.h(0.5) == pytest.approx(1.25)

    def test_constant_ratio_weak_passes_strict_fails(self):
        d = ts.DiffusionSpec.gbm(0.1, 1.0)
        fp = ts.fundamental_pair(d, 1.2)
        g = ts.PiecewiseFunction([(0.0, INF, ts.parse("2*x^2"))])  # h == 2
        tf = ts.build_threshold_function(d, fp, g, left_end="holds")
        res = ts.check_threshold_optimality(tf, 5.0)
        assert res.weak.passed
        assert not res.strict.passed

    def test_left_and_right_parts(self, ex1_d4):
        weak, strict = left_dominance(ex1_d4.tf, 4.0)
        assert weak.passed and strict.passed
        assert right_nonincreasing(ex1_d4.tf, 4.0).passed
        # below the stationary point at 1 the ratio is still increasing
        assert not right_nonincreasing(ex1_d4.tf, 0.5).passed


class TestSmoothPasting:
    def test_two_piece_equal_slopes(self, ex2):
        res = ts.smooth_pasting_check(ex2.fp, ex2.g, 18.0)
        assert res.status == "smooth"
        assert res.value_slope == pytest.approx(136.0, abs=1e-4)
        assert res.payoff_slope_right == pytest.approx(136.0, abs=1e-4)

    def test_cubic_power_equal_slopes(self, ex1_d4):
        res = ts.smooth_pasting_check(ex1_d4.fp, ex1_d4.g, 4.0)
        assert res.status == "smooth"
        assert res.value_slope == pytest.approx(283.0, abs=1e-6)

    def test_kink_below_threshold_is_harmless(self, real_option):
        # American-call-style payoff max(0, x-1): kink at 1 sits below p*
        d, rho = real_option.d, real_option.rho
        fp = real_option.fp
        g = ts.PiecewiseFunction([(0.0, 1.0, ts.parse("0")),
                                  (1.0, INF, ts.parse("x - 1"))])
        beta = fp.exponents[0]
        p_star = beta / (beta - 1.0)
        res = ts.smooth_pasting_check(fp, g, p_star)
        assert res.status == "smooth"

    def test_kink_at_threshold_reports_chain(self):
        # payoff with a concave kink exactly at the maximizer of h = g/psi:
        # h rises like x below 3 and falls like (2x+21)/x^2 above it
        d = ts.DiffusionSpec.gbm(0.1, 1.0)
        fp = ts.fundamental_pair(d, 1.2)
        g = ts.PiecewiseFunction([(0.0, 3.0, ts.parse("x^3")),
                                  (3.0, INF, ts.parse("27 + 2*(x-3)"))])
        tf = ts.build_threshold_function(d, fp, g, left_end="holds")
        mx = ts.maximize_h(tf)
        assert mx.p_star == pytest.approx(3.0, abs=1e-6)
        res = ts.smooth_pasting_check(fp, g, 3.0)
        assert res.status == "one_sided_chain"
        # value slope 18 sits between the payoff slopes 2 and 27
        assert res.payoff_slope_right <= res.value_slope + res.tolerance
        assert res.value_slope <= res.payoff_slope_left + res.tolerance


class TestInvariantsAndValues:
    def test_ratio_times_psi_recovers_payoff(self, ex2):
        tf = ex2.tf
        recon = tf.h(tf.grid) * ex2.fp.psi(tf.grid)
        target = np.asarray(ex2.g.value(tf.grid))
        np.testing.assert_allclose(recon, target, rtol=1e-10)

    def test_value_dominates_payoff(self, ex2, ex1_d4):
        for prob in (ex2, ex1_d4):
            v = prob.tf.value_curve()
            gv = np.asarray(prob.g.value(prob.tf.grid))
            assert np.all(v >= gv - 1e-10 * (1.0 + np.abs(gv)))

    def test_value_matches_sup_formula(self, ex2):
        tf = ex2.tf
        v = tf.value_curve()
        h = tf.h(tf.grid)
        psi = ex2.fp.psi(tf.grid)
        # brute-force suffix supremum
        for i in range(0, len(tf.grid), 97):
            sup_right = h[i:].max()
            expect = psi[i] * max(h[i], sup_right)
            assert v[i] == pytest.approx(expect, rel=1e-10)

    def test_value_at_query_points(self, ex2):
        assert ex2.tf.value_at(9.0, p_star=18.0) == pytest.approx(306.0, rel=1e-10)
        assert ex2.tf.value_at(20.0, p_star=18.0) == pytest.approx(
            ex2.g.value(20.0), rel=1e-12)

    def test_h_table_columns(self, ex2):
        t = ex2.tf.h_table()
        assert t.shape[1] == 4
        i = int(np.argmax(t[:, 1]))
        assert t[i, 0] == pytest.approx(18.0, rel=0.02)
        assert t[:, 1].max() == pytest.approx(34.0 / 9.0, rel=1e-4)

    def test_grid_contains_knots_exactly(self, ex2):
        assert 2.0 in ex2.tf.grid

    def test_analyze_threshold_bundle(self, ex2):
        analysis = ts.analyze_threshold(ex2.d, ex2.fp, ex2.g, x_query=(1.0, 9.0))
        assert analysis.p_star == pytest.approx(18.0, abs=1e-4)
        assert analysis.class_optimality.weak.passed
        assert analysis.class_optimality.strict.passed
        assert analysis.pasting.status == "smooth"
        kind, lower, upper = analysis.continuation
        assert kind == "semi_interval" and lower == 0.0
        assert upper == pytest.approx(18.0, abs=1e-4)
        assert analysis.values[9.0] == pytest.approx(306.0, rel=1e-9)
        assert analysis.values[1.0] == pytest.approx(34.0 / 9.0, rel=1e-9)

    def test_analyze_threshold_requires_left_end(self):
        d = ts.DiffusionSpec.gbm(0.5, 1.0)
        fp = ts.fundamental_pair(d, 8.0)
        g = ts.PiecewiseFunction([(0.0, INF, ts.parse("x^-4"))])  # equals phi
        with pytest.raises(LeftEndNotEstablishedError):
            ts.analyze_threshold(d, fp, g)
