"""Population weight sets: fixed-effects weights, constraint systems,
feasibility, and minimum-norm members.

The 2x2 oracle is derived by hand: support {(0,1),(1,0)} with equal
probabilities demeans to +-1/2 and the normalizer is 1/4, so the weights
are exactly (-2,2),(2,-2). All invariant checks run at 1e-12 or tighter.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drpanel import (
    AssignmentSupport,
    InfeasibleSystemError,
    ValidationError,
    aggregate_weights,
    build_constraints,
    check_feasibility,
    fe_weights,
    solve_min_norm,
    stat_exponential_family,
    stat_mean,
)
from drpanel.support import format_weights_text, write_weights_csv


def support_2x2():
    return AssignmentSupport(
        paths=np.array([[0.0, 1.0], [1.0, 0.0]]), probs=np.array([0.5, 0.5])
    )


def support_t3(probs=None):
    paths = np.array(
        [
            [0, 0, 0],
            [1, 0, 0],
            [0, 1, 0],
            [1, 1, 0],
            [0, 0, 1],
            [1, 0, 1],
            [0, 1, 1],
            [1, 1, 1],
        ],
        dtype=float,
    )
    if probs is None:
        probs = np.full(8, 1.0 / 8.0)
    return AssignmentSupport(paths=paths, probs=np.asarray(probs, dtype=float))


@st.composite
def supports(draw):
    t_len = draw(st.integers(2, 4))
    k_max = min(2**t_len, 5)
    k_len = draw(st.integers(2, k_max))
    idx = draw(
        st.lists(
            st.integers(0, 2**t_len - 1), min_size=k_len, max_size=k_len, unique=True
        )
    )
    paths = np.array(
        [[(code >> t) & 1 for t in range(t_len)] for code in sorted(idx)], dtype=float
    )
    raw = draw(
        st.lists(
            st.floats(0.05, 1.0, allow_nan=False), min_size=k_len, max_size=k_len
        )
    )
    probs = np.asarray(raw)
    return AssignmentSupport(paths=paths, probs=probs / probs.sum())


class TestFixedEffectsWeights:
    def test_two_by_two_oracle_exact(self):
        table = fe_weights(support_2x2())
        np.testing.assert_array_equal(table.weights, [[-2.0, 2.0], [2.0, -2.0]])
        assert table.level == "population"

    def test_rows_average_to_zero(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        w = fe_weights(sup).weights
        np.testing.assert_allclose(w.mean(axis=1), 0.0, atol=1e-13)

    def test_columns_average_to_zero_under_pi(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        w = fe_weights(sup).weights
        np.testing.assert_allclose(sup.probs @ w, 0.0, atol=1e-13)

    def test_normalization(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        w = fe_weights(sup).weights
        val = sup.probs @ (w * sup.paths).mean(axis=1)
        assert val == pytest.approx(1.0, abs=1e-13)

    def test_identical_treatment_margins_rejected(self):
        # constant paths leave zero demeaned variance, so neither the FE
        # coefficient nor the weights are identified
        sup = AssignmentSupport(
            paths=np.array([[0.0, 0.0], [1.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        with pytest.raises(ValidationError):
            fe_weights(sup)

    def test_member_of_outcome_set(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        w = fe_weights(sup).weights
        system = build_constraints(sup, "outc")
        r_eq, r_ge = system.residuals(w.ravel())
        assert r_eq < 1e-12 and r_ge < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(supports())
    def test_invariants_on_random_supports(self, sup):
        w = sup.paths
        # skip degenerate margins where the denominator vanishes
        demeaned = (
            w
            - w.mean(axis=1, keepdims=True)
            - sup.probs @ w
            + (sup.probs @ w).mean()
        )
        denom = sup.probs @ (demeaned * w).mean(axis=1)
        if abs(denom) < 1e-9:
            return
        table = fe_weights(sup).weights
        np.testing.assert_allclose(table.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(sup.probs @ table, 0.0, atol=1e-10)
        val = sup.probs @ (table * w).mean(axis=1)
        assert val == pytest.approx(1.0, abs=1e-10)


class TestAggregateWeights:
    def test_singleton_strata_bitwise_equal(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        table = fe_weights(sup)
        stat = stat_mean(sup.paths)
        agg = aggregate_weights(sup, table, stat)
        assert agg.shape == (4, 3)
        # strata {0} and {7} are singletons: aggregation must copy the row
        np.testing.assert_array_equal(agg[0], table.weights[0])
        np.testing.assert_array_equal(agg[3], table.weights[7])

    def test_weighted_mean_oracle(self):
        probs = np.array([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        sup = support_t3(probs)
        table = fe_weights(sup)
        stat = stat_mean(sup.paths)
        agg = aggregate_weights(sup, table, stat)
        idx = [1, 2, 4]
        p = probs[idx] / probs[idx].sum()
        np.testing.assert_allclose(agg[1], p @ table.weights[idx], atol=1e-14)

    def test_aggregated_rows_stay_in_row_hull(self):
        sup = support_t3()
        table = fe_weights(sup)
        stat = stat_mean(sup.paths)
        agg = aggregate_weights(sup, table, stat)
        for s, idx in enumerate(stat.strata):
            rows = table.weights[list(idx)]
            assert np.all(agg[s] <= rows.max(axis=0) + 1e-12)
            assert np.all(agg[s] >= rows.min(axis=0) - 1e-12)


class TestConstraintSystems:
    def test_outc_shape_and_tags(self):
        sup = support_t3()
        system = build_constraints(sup, "outc")
        assert system.n_vars == 24
        # normalization + 8 row sums + 3 column sums
        assert list(system.tags_eq).count("normalization") == 1
        assert list(system.tags_eq).count("row-sum") == 8
        assert list(system.tags_eq).count("column-sum") == 3
        # one treated-average row per path with any treatment
        assert list(system.tags_ge).count("treated-nonneg") == 7

    def test_dr_shape_and_tags(self):
        sup = support_t3()
        stat = stat_mean(sup.paths)
        system = build_constraints(sup, "dr", stat)
        assert list(system.tags_eq).count("normalization") == 1
        assert list(system.tags_eq).count("row-sum") == 8
        assert list(system.tags_eq).count("conditional-sum") == 12
        # pointwise nonnegativity on every treated cell
        assert list(system.tags_ge).count("treated-nonneg") == 12

    def test_design_needs_statistic(self):
        sup = support_t3()
        with pytest.raises(ValidationError):
            build_constraints(sup, "design")

    def test_unknown_kind_rejected(self):
        sup = support_t3()
        with pytest.raises(ValidationError):
            build_constraints(sup, "both")

    def test_dr_member_satisfies_design_and_outc(self):
        sup = support_t3([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        stat = stat_mean(sup.paths)
        witness = solve_min_norm(sup, build_constraints(sup, "dr", stat)).weights
        for kind in ("design", "outc"):
            system = build_constraints(sup, kind, stat)
            r_eq, r_ge = system.residuals(witness.ravel())
            assert r_eq < 1e-8, kind
            assert r_ge < 1e-8, kind

    @settings(max_examples=40, deadline=None)
    @given(supports())
    def test_dr_implies_outc_on_random_supports(self, sup):
        stat = stat_mean(sup.paths)
        report = check_feasibility(sup, "dr", stat)
        if not report.nonempty:
            return
        witness = report.witness.weights.ravel()
        r_eq, r_ge = build_constraints(sup, "outc").residuals(witness)
        assert r_eq < 1e-7 and r_ge < 1e-7


class TestFeasibility:
    def test_switch_makes_outc_nonempty(self):
        report = check_feasibility(support_2x2(), "outc")
        assert report.nonempty
        kinds = {m[0] for m in report.matched_patterns}
        assert "switch" in kinds

    def test_single_makes_outc_nonempty(self):
        sup = AssignmentSupport(
            paths=np.array([[0.0, 0.0], [0.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        report = check_feasibility(sup, "outc")
        assert report.nonempty
        assert {m[0] for m in report.matched_patterns} == {"single"}

    def test_triple_makes_outc_nonempty(self):
        sup = AssignmentSupport(
            paths=np.array([[0.0, 1.0], [1.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        report = check_feasibility(sup, "outc")
        assert report.nonempty
        assert {m[0] for m in report.matched_patterns} == {"triple"}

    def test_constant_columns_leave_outc_empty(self):
        sup = AssignmentSupport(
            paths=np.array([[0.0, 0.0], [1.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        report = check_feasibility(sup, "outc")
        assert not report.nonempty
        assert report.witness is None
        assert report.matched_patterns == ()

    def test_dr_needs_within_stratum_variation(self):
        # strata by mean exposure are singletons here, so dr is empty
        sup = AssignmentSupport(
            paths=np.array([[0.0, 1.0], [1.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        stat = stat_mean(sup.paths)
        assert not check_feasibility(sup, "dr", stat).nonempty
        assert not check_feasibility(sup, "design", stat).nonempty

    def test_within_stratum_switch_opens_dr(self):
        sup = support_2x2()
        stat = stat_mean(sup.paths)
        report = check_feasibility(sup, "dr", stat)
        assert report.nonempty
        assert report.stratum is not None

    def test_triple_alone_cannot_open_dr(self):
        # A pooled statistic can place (1,1) and (0,1) in one stratum.
        # Their only 2x2 pattern is a triple, which supports the outcome
        # set but not the doubly robust one; the LP check agrees.
        paths = np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
        sup = AssignmentSupport(paths=paths, probs=np.array([0.4, 0.3, 0.3]))
        s_fn = {(1, 1): [0.0], (0, 1): [0.0], (0, 0): [1.0]}
        stat = stat_exponential_family(sup.paths, s_fn)
        assert stat.n_strata == 2
        report = check_feasibility(sup, "dr", stat)
        assert not report.nonempty
        assert check_feasibility(sup, "outc").nonempty

    def test_design_counts_stratum_pairs(self):
        sup = support_t3()
        stat = stat_mean(sup.paths)
        report = check_feasibility(sup, "design", stat)
        assert report.nonempty
        assert {m[0] for m in report.matched_patterns} == {"stratum-pair"}

    def test_too_many_periods_rejected(self):
        paths = np.zeros((2, 17))
        paths[1, :] = 1.0
        sup = AssignmentSupport(paths=paths, probs=np.array([0.5, 0.5]))
        with pytest.raises(ValidationError):
            check_feasibility(sup, "outc")

    def test_witness_satisfies_own_system(self):
        sup = support_t3()
        stat = stat_mean(sup.paths)
        report = check_feasibility(sup, "dr", stat)
        system = build_constraints(sup, "dr", stat)
        r_eq, r_ge = system.residuals(report.witness.weights.ravel())
        assert r_eq < 1e-8 and r_ge < 1e-8

    @settings(max_examples=50, deadline=None)
    @given(supports(), st.sampled_from(["outc", "design", "dr"]))
    def test_pattern_and_lp_always_agree(self, sup, kind):
        # check_feasibility raises RuntimeError on any disagreement
        stat = stat_mean(sup.paths) if kind in ("design", "dr") else None
        report = check_feasibility(sup, kind, stat)
        assert report.nonempty == (report.witness is not None)


class TestMinNorm:
    def test_pinned_system_reproduces_fe_weights(self):
        # On the two-path switch support the constraints identify the
        # weights uniquely, so the minimum-norm member is the FE table.
        sup = support_2x2()
        sol = solve_min_norm(sup, build_constraints(sup, "outc"))
        np.testing.assert_allclose(sol.weights, [[-2.0, 2.0], [2.0, -2.0]], atol=1e-9)

    def test_matches_active_set_enumeration_on_dr_system(self):
        # Exhaustive enumeration over the 2^12 candidate active sets is
        # slow but assumption free, and in particular survives the
        # redundant equality rows that break SLSQP here.
        from test_qp import brute_force_qp

        probs = np.array([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        sup = support_t3(probs)
        stat = stat_mean(sup.paths)
        system = build_constraints(sup, "dr", stat)
        sol = solve_min_norm(sup, system)
        q = 2.0 * np.repeat(probs, 3)
        ref = brute_force_qp(
            q, np.zeros(24), system.a_eq, system.b_eq, system.a_ge, system.b_ge
        )
        assert ref is not None
        ours = 0.5 * sol.weights.ravel() @ (q * sol.weights.ravel())
        assert ours <= ref[0] + 1e-8
        np.testing.assert_allclose(sol.weights.ravel(), ref[1], atol=1e-6)

    def test_probability_weighting_matters(self):
        # On the same feasible set, minimizing the probability-weighted
        # norm and the unweighted norm must give different points when
        # the probabilities are skewed, each winning on its own objective.
        from drpanel import qp

        probs = np.array([0.09, 0.04, 0.11, 0.14, 0.07, 0.08, 0.15, 0.32])
        sup = support_t3(probs)
        stat = stat_mean(sup.paths)
        system = build_constraints(sup, "dr", stat)
        w_pi = solve_min_norm(sup, system).weights.ravel()
        w_unw, _ = qp.solve_qp(
            np.full(24, 2.0),
            a_eq=system.a_eq,
            b_eq=system.b_eq,
            a_ge=system.a_ge,
            b_ge=system.b_ge,
        )
        assert np.abs(w_pi - w_unw).max() > 1e-3
        q = np.repeat(probs, 3)
        assert w_pi @ (q * w_pi) < w_unw @ (q * w_unw) - 1e-6
        assert w_unw @ w_unw < w_pi @ w_pi - 1e-6

    def test_infeasible_raises_with_report(self):
        sup = AssignmentSupport(
            paths=np.array([[0.0, 0.0], [1.0, 1.0]]), probs=np.array([0.5, 0.5])
        )
        system = build_constraints(sup, "outc")
        with pytest.raises(InfeasibleSystemError) as err:
            solve_min_norm(sup, system)
        assert err.value.report is not None
        assert not err.value.report.nonempty

    def test_beats_random_feasible_points(self):
        rng = np.random.default_rng(4)
        sup = support_t3()
        stat = stat_mean(sup.paths)
        system = build_constraints(sup, "dr", stat)
        sol = solve_min_norm(sup, system).weights.ravel()
        q = np.repeat(sup.probs, 3)
        base = sol @ (q * sol)
        # feasible perturbations: stay in the equality nullspace and keep
        # strict inequality slack by shrinking toward the witness
        _, _, vt = np.linalg.svd(system.a_eq)
        null = vt[np.linalg.matrix_rank(system.a_eq):]
        for _ in range(100):
            direction = rng.normal(size=null.shape[0]) @ null
            cand = sol + 1e-3 * direction
            if np.min(system.a_ge @ cand - system.b_ge) < 0:
                continue
            assert base <= cand @ (q * cand) + 1e-12


class TestWeightOutput:
    def test_text_format(self):
        sup = support_2x2()
        table = fe_weights(sup)
        text = format_weights_text(sup, table)
        lines = text.splitlines()
        assert lines[0].split() == ["prob", "w1", "w2", "omega1", "omega2"]
        assert lines[1].split() == ["0.50", "0", "1", "-2.00", "2.00"]
        assert lines[2].split() == ["0.50", "1", "0", "2.00", "-2.00"]

    def test_csv_round_trip(self, tmp_path):
        sup = support_2x2()
        table = fe_weights(sup)
        path = tmp_path / "weights.csv"
        write_weights_csv(sup, table, path, notes=("context line",))
        lines = path.read_text().splitlines()
        assert lines[0] == "# context line"
        header = lines[1].split(",")
        assert header == ["k", "path", "prob", "w1", "w2"]
        first = lines[2].split(",")
        assert first[1] == "01"
        # every value cell must parse back as a plain float literal
        for row in lines[2:]:
            for cell in row.split(",")[2:]:
                float(cell)
        assert float(first[2]) == 0.5
        assert float(first[3]) == -2.0
