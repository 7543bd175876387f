import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svfbilevel import expr as ex
from svfbilevel.dsl import parse_problem, permute_lower
from svfbilevel.reformulate import build_kp, build_svf, mpec_residual

from conftest import MINIMAL, SBAR, UBAR, XBAR, YBAR


def _reference_point(inst):
    return inst.join(x=XBAR, y=YBAR, u=UBAR, s=SBAR)


class TestBuildSvf:
    def test_dimensions(self, iso):
        inst = build_svf(iso)
        assert inst.kind == "SVF"
        assert inst.n == 8
        assert len(inst.equalities) == iso.l
        assert len(inst.comp_pairs) == iso.m

    def test_stationarity_rows(self, iso):
        inst = build_svf(iso)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, y, u, s = rng.normal(size=1), rng.normal(size=2), rng.normal(size=2), rng.normal(size=3)
            h1 = u[0] - x[0] + 5 / 8 - 2 * s[0] * u[0] + 2 * s[1] * (u[0] - 1)
            h2 = u[1] - 27 / 8 + 2 * s[0] * u[1] + 2 * s[1] * u[1] + s[2]
            got = inst.eq(inst.join(x=x, y=y, u=u, s=s))
            assert np.allclose(got, [h1, h2], rtol=1e-13, atol=1e-13)

    def test_dominance_row_uses_y_and_u(self, iso):
        inst = build_svf(iso)
        row = inst.inequalities[inst.rows_labelled("dominance")[0]]
        assert {"y", "u"} <= ex.blocks(row)

    def test_reference_point_feasible(self, iso):
        inst = build_svf(iso)
        assert mpec_residual(inst, _reference_point(inst)).feasible(1e-12)

    def test_perturbed_multiplier(self, iso):
        inst = build_svf(iso)
        w = inst.join(x=XBAR, y=YBAR, u=UBAR, s=SBAR + [0.1, 0, 0])
        res = mpec_residual(inst, w)
        assert res.equality_inf_norm == pytest.approx(0.5, abs=1e-14)

    def test_unconstrained_lower(self):
        inst = build_svf(parse_problem(MINIMAL))
        assert inst.n == 3 and inst.comp_pairs == [] and len(inst.equalities) == 1
        res = mpec_residual(inst, np.zeros(3))
        assert res.dominance_violation == 0.0 and res.equality_inf_norm == 0.0

    def test_minimal_residual_at_offset(self):
        inst = build_svf(parse_problem(MINIMAL))
        # grad_u (u - x)^2 = 2(u - x)
        assert mpec_residual(inst, inst.join(x=[1.0], y=[0.0], u=[0.0])).equality_inf_norm == 2.0

    def test_wrong_length(self, iso):
        with pytest.raises(ValueError):
            mpec_residual(build_svf(iso), np.zeros(3))

    def test_debug_json(self, iso):
        data = json.loads(build_svf(iso).to_json())
        assert [b["name"] for b in data["blocks"]] == ["x", "y", "u", "s"]
        assert len(data["comp_pairs"]) == 3


class TestBuildKp:
    def test_dimensions(self, iso):
        inst = build_kp(iso)
        assert inst.kind == "KP" and inst.n == 6
        assert "u" not in inst.block_map

    def test_global_solution_infeasible(self, iso):
        inst = build_kp(iso)
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = rng.uniform(0, 10, 3)
            s[2] = 0.0  # third constraint inactive at the point
            res = mpec_residual(inst, inst.join(x=XBAR, y=YBAR, s=s))
            assert res.equality_inf_norm >= 27 / 8 - 1e-12

    def test_unconstrained_lower(self):
        inst = build_kp(parse_problem(MINIMAL))
        assert inst.n == 2 and inst.inequalities == [] and len(inst.equalities) == 1

    def test_lower_kkt_pair_has_zero_residual(self, iso):
        inst = build_kp(iso)
        res = mpec_residual(inst, inst.join(x=XBAR, y=UBAR, s=SBAR))
        assert res.equality_inf_norm <= 1e-14 and res.complementarity_inf_norm <= 1e-14

    def test_matches_svf_with_u_equal_y(self, iso):
        svf, kp = build_svf(iso), build_kp(iso)
        to_y = {"u": "y"}
        assert [ex.substitute(e, to_y) for e in svf.equalities] == kp.equalities
        kept = [k for k, lab in enumerate(svf.inequality_labels) if lab[0] not in ("dominance", "g_u")]
        assert [svf.inequality_labels[k] for k in kept] == kp.inequality_labels
        assert [ex.substitute(svf.inequalities[k], to_y) for k in kept] == kp.inequalities


class TestResidualProperties:
    @given(st.permutations([0, 1, 2]), st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, order, seed):
        from conftest import load

        base = load("IsolatedPointCounterexample")
        perm = permute_lower(base, order)
        a, b = build_svf(base), build_svf(perm)
        rng = np.random.default_rng(seed)
        for _ in range(10):
            x, y, u, s = rng.normal(size=1), rng.normal(size=2), rng.normal(size=2), rng.uniform(0, 2, 3)
            ra = mpec_residual(a, a.join(x=x, y=y, u=u, s=s))
            rb = mpec_residual(b, b.join(x=x, y=y, u=u, s=s[list(order)]))
            assert np.allclose(
                [ra.equality_inf_norm, ra.inequality_violation_inf_norm, ra.complementarity_inf_norm, ra.dominance_violation],
                [rb.equality_inf_norm, rb.inequality_violation_inf_norm, rb.complementarity_inf_norm, rb.dominance_violation],
                rtol=1e-12,
                atol=1e-12,
            )

    @given(st.lists(st.floats(-3, 3), min_size=8, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_complementarity_is_s_times_g_at_u(self, w):
        from conftest import load

        prob = load("IsolatedPointCounterexample")
        inst = build_svf(prob)
        w = np.array(w)
        b = inst.split(w)
        g_u = np.array([prob.evaluate(g, b["x"], b["u"]) for g in prob.g])
        res = mpec_residual(inst, w)
        assert res.complementarity_inf_norm == pytest.approx(np.max(np.abs(b["s"] * g_u)), rel=1e-12, abs=1e-300)
        w2 = w.copy()
        w2[1:3] += 1.0  # y shift leaves it unchanged
        assert mpec_residual(inst, w2).complementarity_inf_norm == res.complementarity_inf_norm

    def test_residuals_nonnegative_on_corpus(self, corpus_problems):
        rng = np.random.default_rng(5)
        for prob in corpus_problems:
            for builder in (build_svf, build_kp):
                inst = builder(prob)
                for _ in range(5):
                    r = mpec_residual(inst, rng.normal(size=inst.n))
                    assert min(r.equality_inf_norm, r.inequality_violation_inf_norm, r.complementarity_inf_norm, r.dominance_violation) >= 0
