import numpy as np
import pytest

from svfbilevel import expr as ex
from svfbilevel.bench import corpus_dir
from svfbilevel.driver import solve_svf_sbal
from svfbilevel.dsl import parse_problem
from svfbilevel.oracle import (
    GlobalResult,
    GridSpec,
    OracleCache,
    OracleError,
    fd_check,
    global_solve,
    value_function,
)

from conftest import MINIMAL, UBAR, YBAR, load

BOX = ((-4.0, 4.0), (-4.0, 4.0))


class TestGridSpec:
    def test_validation(self):
        for bad in ({"resolution": 2}, {"shrink": 1.0}, {"ybox": ((0.0, np.inf),)}):
            with pytest.raises(ValueError):
                GridSpec(**bad)

    def test_digest_tracks_fields(self):
        assert GridSpec().digest() == GridSpec().digest()
        assert GridSpec().digest() != GridSpec(resolution=101).digest()


class TestValueFunction:
    def test_two_lower_solutions_at_zero(self, iso):
        res = value_function(iso, [0.0], GridSpec(ybox=BOX))
        assert res.V == pytest.approx(6.640625, abs=1e-6)
        assert len(res.argmins) == 2
        found = sorted(res.argmins, key=lambda y: y[0])
        assert np.linalg.norm(found[0] - YBAR) <= 1e-4
        assert np.linalg.norm(found[1] - UBAR) <= 1e-4

    def test_single_lower_solution_left_of_zero(self, iso):
        res = value_function(iso, [-0.5], GridSpec(ybox=BOX))
        assert len(res.argmins) == 1
        assert np.linalg.norm(res.argmins[0] - YBAR) <= 1e-4

    def test_continuous_across_zero(self, iso):
        spec = GridSpec(ybox=BOX)
        vals = [value_function(iso, [x], spec).V for x in (-1e-3, 0.0, 1e-3)]
        assert max(abs(v - 6.640625) for v in vals) <= 1e-2

    def test_unconstrained_quadratic(self):
        prob = parse_problem(
            "var x[1]; var y[2]; upper { minimize x[1]; } "
            "lower { minimize (y[1] - 0.3*x[1])^2 + 2*(y[2] + 0.7)^2 + y[1]*y[2]; }"
        )
        x = 1.3
        # stationarity: [2 1; 1 4] y = [0.6 x; -2.8]
        want = np.linalg.solve([[2.0, 1.0], [1.0, 4.0]], [0.6 * x, -2.8])
        res = value_function(prob, [x], GridSpec(ybox=((-3.0, 3.0), (-3.0, 3.0))))
        assert len(res.argmins) == 1
        assert np.linalg.norm(res.argmins[0] - want) <= 1e-6

    def test_empty_lower_set(self):
        prob = parse_problem("var x[1]; var y[1]; upper { minimize x[1]; } lower { minimize y[1]; y[1]^2 + 1 <= 0; }")
        with pytest.raises(OracleError):
            value_function(prob, [0.0], GridSpec(ybox=((-1.0, 1.0),)))

    def test_feasible_set_thinner_than_grid(self):
        # Y(x) = [4x - 12, 6 - x/2] has width about 1e-9 here
        prob = load("LiuHart1994")
        x = 4.0 - 2.4e-10
        res = value_function(prob, [x])
        assert res.V == pytest.approx(4 * x - 12, abs=1e-8)

    def test_dimension_limits(self):
        big = parse_problem("var x[1]; var y[4]; upper { minimize x[1]; } lower { minimize y[1]^2; }")
        with pytest.raises(OracleError):
            value_function(big, [0.0])
        with pytest.raises(OracleError):
            global_solve(big)
        wide = parse_problem("var x[3]; var y[1]; upper { minimize x[1]; } lower { minimize y[1]^2; }")
        with pytest.raises(OracleError):
            global_solve(wide)

    def test_wrong_x_length(self, iso):
        with pytest.raises(ValueError):
            value_function(iso, [0.0, 1.0])


class TestGlobalSolve:
    def test_minimal_toy(self):
        prob = parse_problem(MINIMAL)
        res = global_solve(prob, GridSpec(xbox=((-2.0, 2.0),), ybox=((-2.0, 2.0),)))
        assert np.linalg.norm(np.r_[res.x, res.y]) <= 1e-3
        assert abs(res.F) <= 1e-6

    def test_nonconvex_lower_reference(self):
        prob = load("MitsosBarton2006Ex318")
        res = global_solve(prob)
        assert np.linalg.norm(np.r_[res.x, res.y] - np.r_[prob.reference()[0], prob.reference()[1]]) <= 1e-3

    def test_cache_round_trip(self, tmp_path):
        prob = parse_problem(MINIMAL)
        spec = GridSpec(xbox=((-2.0, 2.0),), ybox=((-2.0, 2.0),))
        cache = OracleCache(tmp_path / "cache")
        assert cache.get(prob, spec) is None
        first = global_solve(prob, spec, cache=cache)
        stored = cache.get(prob, spec)
        assert stored is not None and stored.to_dict() == first.to_dict()
        assert global_solve(prob, spec, cache=cache).to_dict() == first.to_dict()
        assert cache.get(prob, GridSpec(resolution=51)) is None

    def test_result_dict(self):
        res = GlobalResult(np.array([1.0]), np.array([0.0, 2.0]), 3.0, 4.0, 4.0)
        back = GlobalResult.from_dict(res.to_dict())
        assert back.to_dict() == res.to_dict()


class TestFdCheck:
    def test_polynomials(self):
        for text in ("x[1]^3*y[1] - 2*y[2]^2 + x[1]*y[2]", "(y[1] - x[1])^4 + 3*y[1]"):
            prob = parse_problem(f"var x[1]; var y[2]; upper {{ minimize {text}; }} lower {{ minimize y[1]^2; }}")
            assert fd_check(prob.F, samples=20).max_rel_error <= 1e-9
            assert fd_check(prob.F, samples=20, order=2).max_rel_error <= 1e-5

    def test_constant_is_exact(self):
        rep = fd_check(ex.Const(3.0), samples=5)
        assert rep.max_rel_error == 0.0

    def test_transcendental(self):
        e = parse_problem(
            "var x[1]; var y[1]; upper { minimize exp(x[1])*sin(y[1]) + cos(x[1]*y[1]); } lower { minimize y[1]^2; }"
        ).F
        assert fd_check(e, samples=50).max_rel_error <= 1e-6
        assert fd_check(e, samples=50, order=2).max_rel_error <= 1e-5

    def test_domain_errors_counted(self):
        e = parse_problem("var x[1]; var y[1]; upper { minimize log(x[1]); } lower { minimize y[1]^2; }").F
        rep = fd_check(e, samples=40, box=(-1.0, 1.0))
        assert rep.skipped > 0 and rep.evaluated + rep.skipped == 40
        assert rep.max_rel_error <= 1e-6

    def test_shift_derivatives(self):
        assert fd_check("shift", samples=1000).max_rel_error <= 1e-6

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            fd_check(ex.Const(1.0), samples=0)
        with pytest.raises(ValueError):
            fd_check("other")


CORPUS = sorted(p.stem for p in corpus_dir().glob("*.blp"))


class TestDominanceAudit:
    @pytest.mark.parametrize(
        "name",
        [
            pytest.param(
                n,
                marks=pytest.mark.xfail(strict=True, reason="converged y sits 1.5e-2 from the lower minimizer"),
            )
            if n == "Mirrlees1999"
            else n
            for n in CORPUS
        ],
    )
    def test_converged_output_near_value_function(self, name):
        prob = load(name)
        rep = solve_svf_sbal(prob)
        assert rep.criterion == 1
        V = value_function(prob, rep.x).V
        assert prob.evaluate(prob.f, rep.x, rep.y) <= V + 1e-4
