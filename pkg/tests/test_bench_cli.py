import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svfbilevel.bench import (
    CSV_COLUMNS,
    GAMMA_GRID,
    BenchReport,
    BenchRow,
    MissingReferenceError,
    accuracy_ratio,
    corpus_dir,
    evaluate_metrics,
    performance_ratio,
    profile_curve,
    run_suite,
)
from svfbilevel.cli import EXIT_OK, EXIT_PARSE, EXIT_REFERENCE, EXIT_SOLVER, main
from svfbilevel.driver import SolveReport

from conftest import SBAR, UBAR, XBAR, YBAR


def _report(x, y, F, f, time_s=1.0):
    return SolveReport("P", "svf-sbal", list(x), list(y), None, None, [0.0], 1, F, f, time_s, "n/a", 42)


def _row(problem, solver, omega, time_s=1.0):
    return BenchRow(problem, solver, omega, omega, omega, omega <= 1e-3, omega <= 1e-3, omega <= 1e-3, time_s, 1, 42)


omegas = st.one_of(st.just(0.0), st.floats(1e-12, 1.0), st.just(math.inf))


class TestMetrics:
    def test_exact_solution(self):
        m = evaluate_metrics(_report([1.0], [2.0], 3.0, 4.0), ([1.0], [2.0], 3.0, 4.0))
        assert (m.eps_x, m.eps_f, m.omega) == (0.0, 0.0, 0.0)
        assert m.success and m.obj_success and m.sol_success

    def test_closed_threshold(self):
        ref = (XBAR, YBAR, -6.0, 6.640625)
        m = evaluate_metrics(_report([0.001], YBAR, -6.0, 6.640625), ref)
        assert m.eps_x == 1e-3 and m.success and m.sol_success

    def test_objective_success_only(self):
        ref = ([1.0], [0.9575], 1.0018, -1.0)
        m = evaluate_metrics(_report([1.0], [0.9575 + 1.54e-2], 1.0018 + 9.18e-4, -1.0), ref)
        assert m.eps_x == pytest.approx(1.54e-2) and m.eps_f == pytest.approx(9.18e-4)
        assert m.success and m.obj_success and not m.sol_success

    def test_euclidean_norm(self):
        m = evaluate_metrics(_report([3.0], [4.0], 0.0, 0.0), ([0.0], [0.0], 0.0, 0.0))
        assert m.eps_x == 5.0

    def test_missing_reference(self):
        with pytest.raises(MissingReferenceError):
            evaluate_metrics(_report([0.0], [0.0], 0.0, 0.0), None)

    def test_nan_becomes_inf(self):
        m = evaluate_metrics(_report([math.nan], [0.0], math.nan, 0.0), ([0.0], [0.0], 0.0, 0.0))
        assert m.omega == math.inf and not m.success

    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
    def test_omega_is_min(self, v):
        m = evaluate_metrics(_report(v[:1], v[1:2], v[2], v[3]), ([0.0], [0.0], 0.0, 0.0))
        assert 0 <= m.omega <= m.eps_x and m.omega <= m.eps_f


class TestRatios:
    def test_four_branches(self):
        assert accuracy_ratio(1e-4, 1e-5) == 1.0
        assert accuracy_ratio(0.0, 0.0) == 0.0
        assert accuracy_ratio(1e-4, 0.0) == 50.0
        assert accuracy_ratio(0.01, 1e-5) == 100.0

    def test_time_ratio(self):
        acc, tim = performance_ratio([1e-4, 1e-5], [2.0, 2.0])
        assert tim == [0.0, 0.0] and acc[1] == 0.0

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            performance_ratio([1e-4], [1.0, 2.0])

    @given(st.lists(omegas, min_size=1, max_size=5))
    @settings(max_examples=300)
    def test_branch_exhaustive(self, table):
        acc, _ = performance_ratio(table, [1.0] * len(table))
        omega_min = min(table)
        for w, a in zip(table, acc):
            if w > 1e-3:
                assert a == 100.0
            elif w == 0.0:
                assert a == 0.0
            elif omega_min == 0.0:
                assert a == 50.0
            else:
                assert 0.0 <= a == math.log10(w / omega_min)
        winners = [a for w, a in zip(table, acc) if w == omega_min and w <= 1e-3]
        # the best successful solver, and only solvers tied with it, get ratio 0
        assert all(a == 0.0 for a in winners)
        assert all(w == omega_min for w, a in zip(table, acc) if a == 0.0)


class TestProfiles:
    def test_single_solver_zero_ratio(self):
        pts = profile_curve({"A": [0.0]})["A"]
        assert len(pts) == len(GAMMA_GRID) == 2001
        assert all(p.fraction == 1.0 for p in pts)

    def test_two_solvers_one_problem(self):
        curves = profile_curve({"A": [0.0], "B": [1.0]})
        frac = {s: {round(p.gamma, 2): p.fraction for p in pts} for s, pts in curves.items()}
        assert frac["A"][0.0] == 1.0
        assert frac["B"][0.95] == 0.0 and frac["B"][1.0] == 1.0

    def test_empty_table(self):
        with pytest.raises(ValueError):
            profile_curve({})

    @given(st.lists(st.lists(omegas, min_size=3, max_size=3), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_bounded(self, table):
        rows = [_row(f"p{i}", s, w) for i, ws in enumerate(table) for s, w in zip("ABC", ws)]
        report = BenchReport(rows)
        for metric in ("success", "objective", "solution", "time"):
            for pts in report.profiles(metric).values():
                fr = np.array([p.fraction for p in pts])
                assert np.all(np.diff(fr) >= 0) and np.all((fr >= 0) & (fr <= 1))


class TestReport:
    def _report(self):
        return BenchReport(
            [_row("p1", "A", 1e-4, 0.5), _row("p1", "B", 0.2, 0.25), _row("p2", "A", 0.0, 1.0), _row("p2", "B", 1e-9, 3.0)]
        )

    def test_summary(self):
        s = self._report().summary()
        assert s["A"] == {"success": 2, "obj_success": 2, "sol_success": 2, "time_s": 1.5}
        assert s["B"]["success"] == 1

    def test_ratio_table(self):
        r = self._report().ratios("success")
        assert r == {"A": [0.0, 0.0], "B": [100.0, 50.0]}

    def test_csv_round_trip(self, tmp_path):
        rep = BenchReport([_row("p", "A", 1 / 3, 0.1 + 0.2), _row("p", "B", math.inf, 2.0)])
        rep.write_csv(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
        assert BenchReport.read_csv(tmp_path / "t.csv") == rep

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            BenchReport.read_csv(tmp_path / "t.csv")

    def test_svg(self, tmp_path):
        self._report().write_svg(tmp_path / "p.svg")
        assert "<svg" in (tmp_path / "p.svg").read_text()[:500]


@pytest.fixture
def small_corpus(tmp_path):
    for name in ("QuadraticToy", "MorganPatrone2006c"):
        shutil.copy(corpus_dir() / f"{name}.blp", tmp_path)
    (tmp_path / "Broken.blp").write_text("var x[1]; upper {")
    return tmp_path


class TestSuite:
    def test_rows_sorted_and_failures_recorded(self, small_corpus):
        rep = run_suite(small_corpus, solvers=("svf-sbal", "kp-sbal"))
        assert [(r.problem, r.solver) for r in rep.rows] == [
            ("Broken", "kp-sbal"),
            ("Broken", "svf-sbal"),
            ("MorganPatrone2006c", "kp-sbal"),
            ("MorganPatrone2006c", "svf-sbal"),
            ("QuadraticToy", "kp-sbal"),
            ("QuadraticToy", "svf-sbal"),
        ]
        broken = rep.row("Broken", "svf-sbal")
        assert broken.criterion == -1 and broken.omega == math.inf
        assert rep.row("MorganPatrone2006c", "svf-sbal").success

    def test_deterministic(self, small_corpus):
        def strip(rep):
            return [{k: v for k, v in r.__dict__.items() if k != "time_s"} for r in rep.rows]

        a = run_suite(small_corpus, solvers=("svf-sbal",), seed=3)
        b = run_suite(small_corpus, solvers=("svf-sbal",), seed=3)
        assert strip(a) == strip(b)

    def test_unknown_solver(self, small_corpus):
        with pytest.raises(ValueError):
            run_suite(small_corpus, solvers=("newton",))


class TestCli:
    def test_solve(self, capsys, tmp_path):
        out_json = tmp_path / "r.json"
        code = main(["solve", str(corpus_dir() / "QuadraticToy.blp"), "--json", str(out_json), "--metrics"])
        assert code == EXIT_OK
        assert "success=True" in capsys.readouterr().out
        assert SolveReport.from_json(out_json.read_text()).problem == "QuadraticToy"

    def test_parse_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.blp"
        bad.write_text("var x[1]; upper {")
        assert main(["solve", str(bad)]) == EXIT_PARSE
        assert main(["solve", str(tmp_path / "missing.blp")]) == EXIT_PARSE

    def test_solver_failure(self, tmp_path):
        bad = tmp_path / "dom.blp"
        bad.write_text(
            "var x[1]; var y[1]; upper { minimize log(x[1]) + y[1]^2; } "
            "lower { minimize (y[1] - x[1])^2; } meta { x0 = [-1]; y0 = [0]; }"
        )
        assert main(["solve", str(bad)]) == EXIT_SOLVER

    def test_missing_reference(self, tmp_path):
        src = tmp_path / "noref.blp"
        src.write_text("var x[1]; var y[1]; upper { minimize x[1]^2 + y[1]^2; } lower { minimize (y[1] - x[1])^2; }")
        assert main(["solve", str(src)]) == EXIT_OK
        assert main(["solve", str(src), "--metrics"]) == EXIT_REFERENCE

    def test_certify(self, capsys):
        point = json.dumps({"x": XBAR.tolist(), "y": YBAR.tolist(), "u": UBAR.tolist(), "s": SBAR.tolist()})
        code = main(["certify", str(corpus_dir() / "IsolatedPointCounterexample.blp"), "--point", point, "--mode", "W"])
        assert code == EXIT_OK
        assert json.loads(capsys.readouterr().out)["cls"] == "W"

    def test_certify_bad_point(self):
        assert main(["certify", str(corpus_dir() / "QuadraticToy.blp"), "--point", "{"]) == EXIT_PARSE

    def test_oracle_value(self, capsys):
        code = main(
            ["oracle", str(corpus_dir() / "IsolatedPointCounterexample.blp"), "--box", "-4", "4", "--value-at", "0"]
        )
        assert code == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["V"] == pytest.approx(6.640625, abs=1e-6) and len(out["argmins"]) == 2

    def test_bench(self, small_corpus, tmp_path, capsys):
        csv_path, svg_path = tmp_path / "b.csv", tmp_path / "b.svg"
        code = main(["bench", str(small_corpus), "--solvers", "svf-sbal", "--csv", str(csv_path), "--svg", str(svg_path)])
        assert code == EXIT_OK
        assert len(BenchReport.read_csv(csv_path).rows) == 3
        assert svg_path.exists()
        assert "Suc." in capsys.readouterr().out
