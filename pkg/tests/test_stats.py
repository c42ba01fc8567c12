import itertools
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats as sps

from rotomtl.stats import (
    betainc_reg,
    cosine_trace,
    delta_k,
    improvement_report,
    paired_ttest_one_sided,
    student_t_sf,
    two_sample_t,
)


class TestSpecialFunctions:
    @pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (10.0, 0.5, 0.01), (1.0, 1.0, 0.42), (50.0, 50.0, 0.5)])
    def test_betainc(self, a, b, x):
        assert abs(betainc_reg(a, b, x) - special.betainc(a, b, x)) < 1e-13

    def test_betainc_ends(self):
        assert betainc_reg(2.0, 3.0, 0.0) == 0.0 and betainc_reg(2.0, 3.0, 1.0) == 1.0

    @pytest.mark.parametrize("t", [-6.0, -1.3, 0.0, 0.7, 2.132, 4.604, 25.0])
    @pytest.mark.parametrize("df", [1, 2, 4, 9, 30, 200])
    def test_t_tail(self, t, df):
        ref = sps.t.sf(t, df)
        assert abs(student_t_sf(t, df) - ref) <= 1e-12 * max(ref, 1e-300) + 1e-15

    def test_tabulated_critical_values(self):
        # one-sided 5% critical values
        for df, crit in [(1, 6.314), (4, 2.132), (9, 1.833), (29, 1.699)]:
            assert abs(student_t_sf(crit, df) - 0.05) < 5e-4


class TestPairedTTest:
    def test_identical(self):
        res = paired_ttest_one_sided([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res["t"] == 0.0 and not res["significant"] and res["degenerate"]

    def test_constant_shift_is_degenerate(self):
        res = paired_ttest_one_sided([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        assert res["degenerate"] and not res["significant"] and res["t"] == -math.inf

    def test_jittered_improvement(self):
        b = [0.3, 0.5, 0.2, 0.9, 0.4]
        a = [x + 1.0 + j for x, j in zip(b, [1e-3, -2e-3, 0.0, 1.5e-3, -5e-4])]
        res = paired_ttest_one_sided(a, b)
        assert res["significant"] and res["p"] < 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_against_reference(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(0.2, 1, 6), rng.normal(0, 1, 6)
        res = paired_ttest_one_sided(a, b)
        ref = sps.ttest_rel(a, b, alternative="greater")
        assert abs(res["t"] - ref.statistic) < 1e-10 and abs(res["p"] - ref.pvalue) < 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            paired_ttest_one_sided([1.0], [2.0])
        with pytest.raises(ValueError):
            paired_ttest_one_sided([1.0, 2.0], [1.0])
        with pytest.raises(ValueError):
            paired_ttest_one_sided([1.0, 2.0], [0.0, 1.5], alpha=0.0)


class TestTwoSample:
    def test_worked_example(self):
        res = two_sample_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        # means 3 and 4, pooled variance 2.5, standard error sqrt(2.5 * 2 / 5) = 1
        assert abs(res["t"] - -1.0) < 1e-10 and res["df"] == 8

    def test_against_reference(self):
        a, b = [0.1, 0.4, 0.35, 0.8], [0.2, 0.1, 0.0, 0.05, 0.3]
        assert abs(two_sample_t(a, b)["t"] - sps.ttest_ind(a, b).statistic) < 1e-12

    def test_constant(self):
        with pytest.raises(ValueError):
            two_sample_t([1.0, 1.0], [1.0, 1.0])


class TestDelta:
    def test_examples(self):
        assert delta_k(0.7, 0.7, True) == 0.0
        assert delta_k(0.5, 1.0, True) == 50.0
        assert abs(delta_k(0.9, 0.8, False) - 12.5) < 1e-12

    def test_zero_baseline(self):
        with pytest.raises(ValueError):
            delta_k(1.0, 0.0, True)

    @pytest.mark.parametrize("better,lower", list(itertools.product([True, False], repeat=2)))
    def test_sign_law(self, better, lower):
        for s in (0.8, 3.0, -2.0):
            step = 0.1 * abs(s)
            m = s - step if better == lower else s + step
            assert (delta_k(m, s, lower) > 0) == better

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-6), st.booleans())
    def test_sign_law_property(self, m, s, lower):
        if m == s:
            return
        better = m < s if lower else m > s
        assert (delta_k(m, s, lower) > 0) == better


class TestImprovementReport:
    def test_aggregates_recompute(self):
        rep = improvement_report([0.5, 0.9, 2.0], [1.0, 0.8, 1.6], [True, False, True])
        d = rep.deltas
        assert d == [delta_k(0.5, 1.0, True), delta_k(0.9, 0.8, False), delta_k(2.0, 1.6, True)]
        assert rep.mean == statistics.fmean(d) and rep.median == statistics.median(d)
        assert rep.max == max(d) and rep.min == min(d) and rep.std == statistics.pstdev(d)
        assert rep.as_dict()["std_over_tasks"] == rep.std

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            improvement_report([1.0], [1.0, 2.0], [True])


class TestCosineTrace:
    def test_mean_over_tasks(self):
        recs = [{"kind": "step", "t": 0, "update_cos": [1.0, 0.5]}, {"kind": "epoch"}, {"kind": "step", "t": 1, "update_cos": [0.2]}]
        assert cosine_trace(recs) == [0.75, 0.2]

    def test_missing(self):
        with pytest.raises(ValueError):
            cosine_trace([{"kind": "step", "t": 0}])

    def test_orthogonal_vanilla(self):
        from rotomtl.combiners import batch_cosine, vanilla

        g = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
        upd = vanilla(g).combined
        trace = cosine_trace([{"kind": "step", "update_cos": [batch_cosine(x, upd) for x in g]}])
        assert abs(trace[0] - 1 / math.sqrt(2)) < 1e-15

    def test_single_task_training(self):
        from rotomtl.combiners import CombinerKind
        from rotomtl.netcore import Backbone, Head, init_dense
        from rotomtl.trainer import MTLModel, TrainConfig, fit, init_state
        from rotomtl.tasks import Batch

        rng = np.random.default_rng(0)
        model = MTLModel(Backbone.mlp([2, 4, 3], rng), [Head([init_dense(3, 1, rng)], loss="mse")])
        data = Batch(rng.standard_normal((8, 2)), [rng.standard_normal((8, 1))])
        cfg = TrainConfig(epochs=2, batch_size=4, combiner=CombinerKind("vanilla"), rotations=False)
        trace = cosine_trace(fit(init_state(model, cfg), data, data).log)
        assert len(trace) == 4 and all(abs(c - 1.0) < 1e-12 for c in trace)

    def test_identical_gradients(self):
        from rotomtl.combiners import batch_cosine, scale_only

        g = np.array([[0.3, -0.2], [1.0, 0.4]])
        upd = scale_only([g, g], [1.0, 1.0]).combined
        assert cosine_trace([{"update_cos": [batch_cosine(g, upd)] * 2}]) == [1.0]
