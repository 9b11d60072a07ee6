import json

import numpy as np
import pytest

import threshold_stop as ts
from threshold_stop.cli import examples_dir, main, run_analyze, run_plotdata
from threshold_stop.report import dumps_report
from threshold_stop.specfile import SpecValidationError, load_problem

INF = float("inf")


def _fb_index(report):
    return {round(s["p_star"], 3): s for s in report["fb_solutions"]}


class TestAnalyze:
    def test_two_piece_end_to_end(self):
        report, code = run_analyze(examples_dir() / "example2.spec")
        assert code == 0
        sols = report["fb_solutions"]
        assert len(sols) == 2
        assert sols[0]["p_star"] == pytest.approx(1.0, abs=1e-6)
        assert sols[0]["second_order"] == "local_min"
        assert sols[0]["certificate"]["overall"] == "necessary_fail"
        assert sols[1]["p_star"] == pytest.approx(18.0, abs=1e-4)
        assert sols[1]["second_order"] == "local_max"
        assert sols[1]["certificate"]["overall"] == "continuation_semi_interval"
        assert report["threshold_analysis"]["p_star"] == pytest.approx(18.0,
                                                                       abs=1e-4)
        values = {v["x"]: v["value"] for v in report["values"]}
        assert values[9.0] == pytest.approx(306.0, rel=1e-9)

    def test_cubic_power_regimes(self):
        report, code = run_analyze(examples_dir() / "example1_delta4.spec")
        assert code == 0
        sols = _fb_index(report)
        assert sols[1.0]["second_order"] == "inconclusive"
        assert sols[4.0]["second_order"] == "local_max"
        assert sols[4.0]["certificate"]["overall"] == "optimal_all_stopping_times"

        report2, _ = run_analyze(examples_dir() / "example1_delta2.spec")
        ta = report2["threshold_analysis"]
        assert ta["status"] == "sup_at_boundary"
        assert ta["unbounded"]
        assert "no optimal threshold" in ta["note"]

        report3, _ = run_analyze(examples_dir() / "example1_delta3.spec")
        ta3 = report3["threshold_analysis"]
        assert ta3["status"] == "sup_at_boundary"
        assert not ta3["unbounded"]
        assert 1.99 <= ta3["limit_estimate"] <= 2.01

    def test_report_is_valid_json_and_reproducible(self):
        r1, _ = run_analyze(examples_dir() / "example2.spec")
        r2, _ = run_analyze(examples_dir() / "example2.spec")
        t1, t2 = dumps_report(r1), dumps_report(r2)
        assert t1 == t2
        parsed = json.loads(t1)
        assert parsed["schema_version"] == 1
        assert parsed["input"]["process.kind"] == "gbm"

    def test_every_verdict_carries_tolerance(self):
        report, _ = run_analyze(examples_dir() / "example2.spec")
        cert = report["fb_solutions"][1]["certificate"]
        for key in ("left_dominance", "pasting_inequality",
                    "stopping_generator_bound", "strict_left_dominance"):
            assert "tolerance" in cert[key]
        assert "tolerance" in report["left_end_verdict"]

    def test_continuation_set_reported(self):
        report, _ = run_analyze(examples_dir() / "example2.spec")
        cs = report["threshold_analysis"]["continuation_set"]
        assert cs["kind"] == "semi_interval"
        assert cs["lower"] == 0.0
        assert cs["upper"] == pytest.approx(18.0, abs=1e-4)

    def test_echo_round_trip_reproduces_report(self, tmp_path):
        # the input echo re-validates and reproduces an identical report
        r1, _ = run_analyze(examples_dir() / "example2.spec")
        echoed = tmp_path / "echo.spec"
        echoed.write_text("\n".join(f"{k} = {v}" for k, v in r1["input"].items())
                          + "\n")
        r2, _ = run_analyze(echoed)
        assert dumps_report(r1) == dumps_report(r2)

    def test_mc_crosscheck_section(self, tmp_path):
        spec = tmp_path / "mc.spec"
        spec.write_text(
            "process.kind = gbm\nprocess.alpha = 0.1\nprocess.sigma = 1\n"
            "discount.rho = 1.2\n"
            "payoff.piece.1.interval = 0, 2\n"
            "payoff.piece.1.formula = ((x-1)^2+1)*x^2\n"
            "payoff.piece.2.interval = 2, inf\n"
            "payoff.piece.2.formula = x - 9 + (15/4)*x^2\n"
            "analysis.x_query = 9\n"
            "mc.n_paths = 30000\nmc.dt = 0.005\nmc.t_max = 15\nmc.seed = 8\n")
        report, code = run_analyze(spec)
        assert code == 0
        [check] = report["mc_crosschecks"]
        assert check["x0"] == 9.0
        assert check["analytic"] == pytest.approx(306.0, rel=1e-9)
        assert check["within_3_std_errors"]

    def test_bundled_mc_spec_matches_criterion_config(self):
        prob = load_problem(examples_dir() / "example2_mc.spec")
        assert prob.mc.n_paths == 1_000_000
        assert prob.mc.dt == pytest.approx(1e-3)
        assert prob.mc.t_max == 25.0
        assert prob.mc.seed == 42
        assert not prob.mc.antithetic

    def test_grid_override_via_env(self, monkeypatch):
        monkeypatch.setenv("THRESHOLD_STOP_GRID_POINTS", "501")
        report, _ = run_analyze(examples_dir() / "example2.spec")
        assert report["threshold_analysis"]["grid_points"] <= 502  # + knot

    def test_missing_file(self):
        with pytest.raises(SpecValidationError, match="not found"):
            run_analyze("/nonexistent/path.spec")


class TestSpecFormats:
    def test_json_encoding_equivalent(self, tmp_path):
        doc = {
            "process": {"kind": "gbm", "alpha": 0.1, "sigma": 1},
            "payoff": {"pieces": [
                {"interval": [0, 2], "formula": "((x-1)^2+1)*x^2"},
                {"interval": [2, "inf"], "formula": "x - 9 + (15/4)*x^2"},
            ]},
            "discount": {"rho": 1.2},
            "analysis": {"x_query": [9]},
        }
        path = tmp_path / "ex2.json"
        path.write_text(json.dumps(doc))
        report, code = run_analyze(path)
        assert code == 0
        assert report["fb_solutions"][1]["p_star"] == pytest.approx(18.0, abs=1e-4)

    def test_validation_error_names_field(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("process.kind = gbm\nprocess.alpha = 0.1\n"
                        "process.sigma = 1\n"
                        "payoff.piece.1.interval = 0, inf\n"
                        "payoff.piece.1.formula = x\n")
        with pytest.raises(SpecValidationError, match="discount.rho"):
            load_problem(path)

    def test_formula_error_names_piece(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("process.kind = gbm\nprocess.alpha = 0.1\n"
                        "process.sigma = 1\ndiscount.rho = 1\n"
                        "payoff.piece.1.interval = 0, inf\n"
                        "payoff.piece.1.formula = x + + 1\n")
        with pytest.raises(SpecValidationError, match="payoff.piece.1.formula"):
            load_problem(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("process.kind = gbm\nprocess.alpha = 0.1\n"
                        "process.sigma = 1\ndiscount.rho = 1\n"
                        "payoff.piece.1.interval = 0, inf\n"
                        "payoff.piece.1.formula = x\nprocess.gamma = 3\n")
        with pytest.raises(SpecValidationError, match="process.gamma"):
            load_problem(path)

    def test_pieces_must_cover_interval(self, tmp_path):
        path = tmp_path / "bad.spec"
        path.write_text("process.kind = gbm\nprocess.alpha = 0.1\n"
                        "process.sigma = 1\ndiscount.rho = 1\n"
                        "payoff.piece.1.interval = 0, 5\n"
                        "payoff.piece.1.formula = x\n")
        with pytest.raises(SpecValidationError, match="cover"):
            load_problem(path)


class TestPlotData:
    def test_h_table_csv(self, tmp_path):
        out = tmp_path / "h.csv"
        run_plotdata(examples_dir() / "example2.spec", "h", out)
        rows = np.genfromtxt(out, delimiter=",", names=True)
        assert rows.dtype.names == ("p", "h", "h1", "h2")
        i = int(np.argmax(rows["h"]))
        assert rows["h"][i] == pytest.approx(34.0 / 9.0, rel=1e-4)
        assert rows["p"][i] == pytest.approx(18.0, rel=0.02)

    def test_psi_table_csv(self, tmp_path):
        out = tmp_path / "psi.csv"
        run_plotdata(examples_dir() / "example2.spec", "psi", out)
        rows = np.genfromtxt(out, delimiter=",", names=True)
        assert rows.dtype.names == ("x", "psi", "psi1", "psi2",
                                    "phi", "phi1", "phi2")
        assert np.all(np.diff(rows["psi"]) > 0)
        assert np.all(np.diff(rows["phi"]) < 0)

    def test_value_csv_dominates_payoff(self, tmp_path):
        out = tmp_path / "v.csv"
        run_plotdata(examples_dir() / "example2.spec", "value", out)
        rows = np.genfromtxt(out, delimiter=",", names=True)
        assert np.all(rows["value"] >= rows["payoff"] - 1e-9)

    def test_mc_sweep_csv(self, tmp_path):
        spec = tmp_path / "small_mc.spec"
        spec.write_text(
            "process.kind = gbm\nprocess.alpha = 0.1\nprocess.sigma = 1\n"
            "discount.rho = 1.2\n"
            "payoff.piece.1.interval = 0, 2\n"
            "payoff.piece.1.formula = ((x-1)^2+1)*x^2\n"
            "payoff.piece.2.interval = 2, inf\n"
            "payoff.piece.2.formula = x - 9 + (15/4)*x^2\n"
            "analysis.x_query = 9\n"
            "mc.n_paths = 4000\nmc.dt = 0.01\nmc.t_max = 10\nmc.seed = 5\n")
        out = tmp_path / "sweep.csv"
        run_plotdata(spec, "mc_sweep", out)
        rows = np.genfromtxt(out, delimiter=",", names=True)
        assert rows.dtype.names == ("p", "mean", "std_error",
                                    "n_stopped", "n_truncated")
        assert len(rows) == 21


class TestMainEntry:
    def test_analyze_writes_report_file(self, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        code = main(["analyze", str(examples_dir() / "example2.spec"),
                     "--report", str(report_path)])
        assert code == 0
        doc = json.loads(report_path.read_text())
        assert doc["fb_solutions"][1]["certificate"]["overall"] \
            == "continuation_semi_interval"

    def test_analyze_stdout(self, capsys):
        code = main(["analyze", str(examples_dir() / "example1_delta4.spec")])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["threshold_analysis"]["p_star"] == pytest.approx(4.0, abs=1e-6)

    def test_validation_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.spec"
        bad.write_text("process.kind = warp\n")
        assert main(["analyze", str(bad)]) == 2
        assert "spec error" in capsys.readouterr().err

    def test_numerical_failure_exit_code(self, tmp_path, capsys):
        # steep decaying mode overflows the pair construction
        bad = tmp_path / "stiff.spec"
        bad.write_text("process.kind = general\nprocess.drift = 0.1\n"
                       "process.volatility = 0.1\nprocess.lower = -inf\n"
                       "process.upper = inf\ndiscount.rho = 0.1\n"
                       "payoff.piece.1.interval = -inf, inf\n"
                       "payoff.piece.1.formula = max(x, 0)\n")
        report, code = run_analyze(bad)
        assert code == 3
        assert report["error"]["type"] == "ShootingFailureError"
        assert main(["analyze", str(bad), "--report", "/dev/null"]) == 3

    def test_mc_subcommand(self, tmp_path, capsys):
        spec = tmp_path / "mc.spec"
        spec.write_text(
            "process.kind = gbm\nprocess.alpha = 0.1\nprocess.sigma = 1\n"
            "discount.rho = 1.2\n"
            "payoff.piece.1.interval = 0, 2\n"
            "payoff.piece.1.formula = ((x-1)^2+1)*x^2\n"
            "payoff.piece.2.interval = 2, inf\n"
            "payoff.piece.2.formula = x - 9 + (15/4)*x^2\n"
            "mc.n_paths = 2000\nmc.dt = 0.01\nmc.t_max = 10\nmc.seed = 5\n")
        code = main(["mc", str(spec), "--x", "9", "--p", "18"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["n_stopped"] + doc["n_truncated"] == 2000
        assert abs(doc["mean"] - 306.0) <= 5 * doc["std_error"] + 5.0

    def test_seed_override_changes_mc(self, tmp_path, capsys):
        spec = tmp_path / "mc.spec"
        spec.write_text(
            "process.kind = gbm\nprocess.alpha = 0.1\nprocess.sigma = 1\n"
            "discount.rho = 1.2\n"
            "payoff.piece.1.interval = 0, inf\n"
            "payoff.piece.1.formula = x^2\n"
            "mc.n_paths = 1000\nmc.dt = 0.01\nmc.t_max = 10\nmc.seed = 5\n")
        main(["mc", str(spec), "--x", "1", "--p", "2"])
        a = json.loads(capsys.readouterr().out)
        main(["mc", str(spec), "--x", "1", "--p", "2", "--seed", "6"])
        b = json.loads(capsys.readouterr().out)
        assert a["mean"] != b["mean"]
        assert a["config"]["seed"] == 5 and b["config"]["seed"] == 6

    def test_plot_data_subcommand(self, tmp_path):
        out = tmp_path / "h.csv"
        code = main(["plot-data", str(examples_dir() / "example1_delta4.spec"),
                     "--what", "h", "--out", str(out)])
        assert code == 0
        assert out.read_text().splitlines()[0] == "p,h,h1,h2"


class TestReportFloats:
    def test_seventeen_significant_digits(self):
        text = dumps_report({"v": 1.0 / 3.0, "w": 306.0, "i": 7, "b": True})
        assert "0.33333333333333331" in text
        assert '"i": 7' in text
        assert '"b": true' in text
        assert json.loads(text)["v"] == 1.0 / 3.0

    def test_non_finite_floats(self):
        text = dumps_report({"a": float("inf"), "b": float("-inf"),
                             "c": float("nan")})
        doc = json.loads(text)
        assert doc == {"a": "inf", "b": "-inf", "c": "nan"}
