import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from oracles import arx_simulate, brute_rmse, tukey_kramer_oracle
from ppgbp.arx import ArxModel, ArxOrders, fit_arx
from ppgbp.core import Feature, IntervalKind
from ppgbp.evaluation import (
    MODEL_ERROR,
    PREDICTION_ERROR,
    DivergedSimulationError,
    ErrorReport,
    ErrorSeries,
    consistency_table,
    cross_prediction_matrix,
    estimate_feature,
    model_error_series,
    one_way_anova,
    pooled_stats,
    rmse,
    subject_consistency,
    summarize,
    tukey_kramer,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def noisy_track(rng, n=400, a=(-0.6,), b=(1.0, 0.5), nk=1, noise=0.1):
    u = rng.standard_normal(n)
    y, _ = arx_simulate(list(a), list(b), nk, u.tolist())
    return y + noise * rng.standard_normal(n), u


class TestRmse:
    def test_examples(self):
        assert rmse(np.zeros(7)) == 0.0
        assert rmse(np.full(9, -2.5)) == 2.5
        assert rmse([3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
        with pytest.raises(ValueError):
            rmse([])

    @given(arrays(np.float64, st.integers(1, 200), elements=finite), st.floats(-100, 100))
    def test_scaling_and_permutation(self, r, k):
        base = rmse(r)
        assert rmse(k * r) == pytest.approx(abs(k) * base, rel=1e-12, abs=1e-300)
        assert rmse(r[::-1]) == pytest.approx(base, rel=1e-13)
        assert rmse(r) == pytest.approx(brute_rmse(r), rel=1e-12, abs=1e-300)
        assert (base == 0) == bool(np.all(r == 0))


class TestErrorSeries:
    def test_validation(self):
        with pytest.raises(ValueError):
            ErrorSeries(Feature.SBP, "NB1", "NB1", [])
        with pytest.raises(ValueError):
            ErrorSeries(Feature.SBP, "NB1", "NB1", [1.0, np.inf])
        s = ErrorSeries("DBP", "BH1", "BH2", [1.0, 2.0], kind="BH", error_type=PREDICTION_ERROR)
        assert s.feature is Feature.DBP and s.kind is IntervalKind.BH
        with pytest.raises(ValueError):
            s.residuals[0] = 0.0


class TestModelError:
    def test_one_step_identity(self, rng):
        y, u = noisy_track(rng)
        model = fit_arx(y, u, ArxOrders(2, 3, 1))
        series = model_error_series(model, y, u, Feature.SBP, "NB1")
        assert abs(rmse(series.residuals) - math.sqrt(model.fit_mse)) <= 1e-12
        assert series.interval_label == series.source_model_label == "NB1"
        assert series.residuals.size == y.size - model.start_index

    def test_free_run_mode(self, rng):
        y, u = noisy_track(rng, noise=0.0)
        model = ArxModel(ArxOrders(1, 2, 1), [-0.6], [1.0, 0.5], 0.0, 0)
        series = model_error_series(model, y, u, Feature.SBP, "BH1", mode="free-run")
        np.testing.assert_allclose(series.residuals, 0.0, atol=1e-9)

    def test_diverging_free_run_raises(self, rng):
        y, u = noisy_track(rng)
        model = ArxModel(ArxOrders(1, 1, 0), [-1.2], [1.0], 0.0, 0)
        with pytest.raises(DivergedSimulationError):
            model_error_series(model, y, u, Feature.SBP, "BH1", mode="free-run")

    def test_unknown_mode(self, rng):
        y, u = noisy_track(rng)
        with pytest.raises(ValueError, match="mode"):
            model_error_series(fit_arx(y, u, ArxOrders(1, 1, 0)), y, u, mode="sideways")

    def test_map_combines_estimates(self, rng):
        ys, us = noisy_track(rng)
        yd, ud = noisy_track(rng, a=(-0.4,), b=(0.7,), nk=3)
        ms, md = fit_arx(ys, us, ArxOrders(1, 2, 1)), fit_arx(yd, ud, ArxOrders(1, 1, 3))
        measured, estimated = estimate_feature(Feature.MAP, (ms, md), ((ys, us), (yd, ud)))
        start = max(ms.start_index, md.start_index)
        assert (ms.start_index, md.start_index) == (2, 3)
        s_hat = ys[2:] - model_error_series(ms, ys, us).residuals
        d_hat = yd[3:] - model_error_series(md, yd, ud).residuals
        np.testing.assert_allclose(measured, (2 * yd[start:] + ys[start:]) / 3, rtol=1e-15)
        np.testing.assert_allclose(estimated, (2 * d_hat + s_hat[start - 2:]) / 3, rtol=1e-13)
        series = model_error_series((ms, md), ((ys, us), (yd, ud)), None, Feature.MAP, "NB2")
        assert series.feature == Feature.MAP and series.residuals.size == ys.size - start


class TestCrossPrediction:
    def setup_models(self, rng, labels):
        models, tracks = {}, {}
        for lb in labels:
            y, u = noisy_track(rng, n=300)
            models[lb] = fit_arx(y, u, ArxOrders(1, 2, 1))
            tracks[lb] = (y, u)
        return models, tracks

    def test_counts_and_no_self_pairs(self, rng):
        bh = [f"BH{i}" for i in range(1, 6)]
        nb = [f"NB{i}" for i in range(1, 7)]
        models, tracks = self.setup_models(rng, bh + nb)
        out_bh = cross_prediction_matrix(models, tracks, "BH", Feature.SBP)
        out_nb = cross_prediction_matrix(models, tracks, "NB", Feature.SBP)
        assert len(out_bh) == 20 and len(out_nb) == 30
        for s in out_bh + out_nb:
            assert s.source_model_label != s.interval_label
            assert s.error_type == PREDICTION_ERROR
        assert {s.interval_label for s in out_bh} == set(bh)
        pairs = {(s.source_model_label, s.interval_label) for s in out_nb}
        assert len(pairs) == 30

    def test_identical_tracks_reproduce_model_error(self, rng):
        y, u = noisy_track(rng)
        model = fit_arx(y, u, ArxOrders(2, 2, 0))
        labels = ["BH1", "BH2", "BH3"]
        out = cross_prediction_matrix({lb: model for lb in labels}, {lb: (y, u) for lb in labels}, "BH", Feature.DBP)
        base = rmse(model_error_series(model, y, u, Feature.DBP, "BH1").residuals)
        assert len(out) == 6
        for s in out:
            assert abs(rmse(s.residuals) - base) <= 1e-10

    def test_short_target_skipped_with_warning(self, rng):
        models, tracks = self.setup_models(rng, ["BH1", "BH2", "BH3"])
        models["BH1"] = ArxModel(ArxOrders(5, 5, 5), np.zeros(5), np.ones(5), 0.0, 0)
        tracks["BH2"] = (tracks["BH2"][0][:8], tracks["BH2"][1][:8])
        with pytest.warns(UserWarning, match="BH1->BH2 skipped"):
            out = cross_prediction_matrix(models, tracks, "BH", Feature.SBP)
        assert len(out) == 5

    def test_needs_two_intervals(self, rng):
        models, tracks = self.setup_models(rng, ["BH1", "NB1"])
        with pytest.raises(ValueError):
            cross_prediction_matrix(models, tracks, "BH", Feature.SBP)


def series(subject, label, residuals, error_type=MODEL_ERROR, feature=Feature.SBP, source=None):
    kind = IntervalKind.BH if label.startswith("BH") else IntervalKind.NB
    return ErrorSeries(feature, label, source or label, residuals, subject, kind, error_type)


class TestSummaries:
    def test_single_series_cell(self, rng):
        r = rng.standard_normal(50)
        cells = summarize([series("S1", "NB1", r)])
        assert len(cells) == 1
        assert cells[0].rmse == rmse(r) and cells[0].n == 50

    def test_pooling_is_not_mean_of_rmses(self, rng):
        r1 = rng.standard_normal(30)
        r2 = 3 * rng.standard_normal(200) + 1
        (cell,) = summarize([series("S2", "BH1", r2), series("S1", "BH1", r1)])
        assert cell.rmse == pytest.approx(brute_rmse(np.concatenate([r1, r2])), rel=1e-12)
        assert cell.rmse != pytest.approx((rmse(r1) + rmse(r2)) / 2)
        assert cell.mean == pytest.approx(np.mean(np.concatenate([r1, r2])), rel=1e-12)
        assert cell.std == pytest.approx(np.std(np.concatenate([r1, r2]), ddof=1), rel=1e-12)

    @given(st.lists(arrays(np.float64, st.integers(1, 40), elements=finite), min_size=1, max_size=6))
    def test_pooled_between_min_and_max(self, parts):
        items = [series(f"S{i}", "NB1", r) for i, r in enumerate(parts)]
        _, pooled, _, _ = pooled_stats(items)
        per = [rmse(r) for r in parts]
        assert min(per) * (1 - 1e-12) <= pooled <= max(per) * (1 + 1e-12)

    def test_order_independent(self, rng):
        items = [series(f"S{i}", f"NB{j}", rng.standard_normal(20)) for i in range(4) for j in range(1, 4)]
        a = summarize(items)
        b = summarize(items[::-1])
        assert a == b

    def test_prediction_grouping(self, rng):
        items = [
            series("S1", "BH2", rng.standard_normal(10), PREDICTION_ERROR, source="BH1"),
            series("S1", "BH3", rng.standard_normal(10), PREDICTION_ERROR, source="BH1"),
            series("S1", "BH1", rng.standard_normal(10), PREDICTION_ERROR, source="BH2"),
        ]
        by_source = {c.label: c.n_series for c in summarize(items)}
        by_target = {c.label: c.n_series for c in summarize(items, group_by="target")}
        assert by_source == {"BH1": 2, "BH2": 1}
        assert by_target == {"BH1": 1, "BH2": 1, "BH3": 1}


class TestAnovaAndTukey:
    def test_anova_matches_scipy(self, rng):
        groups = [rng.normal(m, 1.0, n) for m, n in ((0, 12), (0.5, 20), (1.0, 7), (0.2, 30))]
        f, p, _, df = one_way_anova(groups)
        ref = stats.f_oneway(*groups)
        assert f == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, rel=1e-8)
        assert df == sum(g.size for g in groups) - 4

    def test_tukey_matches_scipy(self, rng):
        groups = {f"S{i:02d}": rng.normal(0.4 * (i % 3), 1.0, int(rng.integers(5, 40))) for i in range(6)}
        ours = tukey_kramer(groups)
        names = sorted(groups)
        ref = stats.tukey_hsd(*[groups[nm] for nm in names])
        assert len(ours) == 15
        for pc in ours:
            i, j = names.index(pc.first), names.index(pc.second)
            assert pc.p_value == pytest.approx(ref.pvalue[i, j], abs=1e-6)
            assert pc.mean_difference == pytest.approx(np.mean(groups[pc.first]) - np.mean(groups[pc.second]))

    def test_tukey_matches_statsmodels(self, rng):
        from statsmodels.stats.multicomp import pairwise_tukeyhsd

        groups = {f"S{i}": rng.normal(0.8 * (i == 2), 1.0, int(rng.integers(8, 25))) for i in range(5)}
        values = np.concatenate([groups[k] for k in sorted(groups)])
        labels = np.concatenate([[k] * groups[k].size for k in sorted(groups)])
        ref = pairwise_tukeyhsd(values, labels, alpha=0.05)
        ours = {(p.first, p.second): p.unequal for p in tukey_kramer(groups)}
        theirs = {(str(a), str(b)): bool(r) for a, b, r in zip(ref.groupsunique[ref._multicomp.pairindices[0]], ref.groupsunique[ref._multicomp.pairindices[1]], ref.reject)}
        assert ours == theirs

    def test_pairs_are_counted_once(self, rng):
        groups = {f"S{i}": rng.standard_normal(10) for i in range(15)}
        res = subject_consistency(groups)
        assert res.n_pairs == 105
        assert len({frozenset((p.first, p.second)) for p in res.pairs}) == 105

    def test_preconditions(self):
        with pytest.raises(ValueError, match="at least 2 subjects"):
            subject_consistency({"S1": np.ones(5)})
        with pytest.raises(ValueError, match="fewer than 2"):
            subject_consistency({"S1": np.ones(5), "S2": np.ones(1)})

    def test_shifted_subject_dominates(self):
        rng = np.random.default_rng(5)
        groups = {f"S{i:02d}": rng.normal(0, 2.0, 60) for i in range(1, 16)}
        groups["S07"] = groups["S07"] + 10.0
        res = subject_consistency(groups)
        unequal = res.unequal_pairs()
        involving = [p for p in unequal if "S07" in p]
        assert len(involving) > len(unequal) / 2
        assert set(unequal) == tukey_kramer_oracle(groups)

    def test_null_rejection_rate(self):
        fractions = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            groups = {f"S{i:02d}": rng.normal(0, 1, 40) for i in range(15)}
            fractions.append(subject_consistency(groups).n_unequal / 105)
        assert np.median(fractions) <= 0.05


class TestReport:
    def make_errors(self, rng, subjects=("S1", "S2", "S3")):
        out = []
        for sid in subjects:
            for feat in (Feature.SBP, Feature.DBP, Feature.MAP):
                for lb in ("NB1", "NB2", "BH1", "BH2"):
                    out.append(ErrorSeries(feat, lb, lb, rng.standard_normal(30), sid, None, MODEL_ERROR))
                for src, tgt in (("NB1", "NB2"), ("NB2", "NB1"), ("BH1", "BH2"), ("BH2", "BH1")):
                    out.append(ErrorSeries(feat, tgt, src, 2 * rng.standard_normal(30), sid, None, PREDICTION_ERROR))
        return out

    def test_tables_and_counts(self, rng):
        report = ErrorReport.from_errors(self.make_errors(rng))
        features, labels, values = report.table(MODEL_ERROR, "NB")
        assert features == ["SBP", "DBP", "MAP"] and labels == ["NB1", "NB2"]
        assert values.shape == (3, 2) and np.all(values >= 0)
        assert len(report.consistency) == 12
        assert report.total_pairs == 12 * 3
        assert 0 <= report.total_unequal <= report.total_pairs

    def test_absent_cell_is_nan(self, rng):
        errs = [e for e in self.make_errors(rng) if not (e.feature == Feature.MAP and e.interval_label == "NB2")]
        _, labels, values = ErrorReport.from_errors(errs).table(MODEL_ERROR, "NB")
        assert np.isnan(values[2, labels.index("NB2")])

    def test_single_subject_skips_consistency(self, rng):
        report = ErrorReport.from_errors(self.make_errors(rng, ("S1",)))
        assert report.consistency == {} and report.notes

    def test_consistency_table_keys(self, rng):
        table = consistency_table(self.make_errors(rng))
        kinds = {k[0] for k in table}
        assert kinds == {IntervalKind.NB, IntervalKind.BH}
        assert {k[1] for k in table} == {MODEL_ERROR, PREDICTION_ERROR}


@pytest.mark.slow
def test_prediction_exceeds_model_over_seeds():
    """Synthetic cohorts over 20 seeds: prediction rMSE at least model rMSE in 90 % of cells.

    Cohorts default to 3 subjects to keep the run near two minutes; set
    ``PPGBP_MC_SUBJECTS=15`` for full-size cohorts.
    """
    import os

    from ppgbp.pipeline import evaluate_subject, fit_subject, prepare_subject, select_models
    from ppgbp.synth import ProtocolConfig, cohort_subject_id, generate_session, subject_seed

    n_subjects = int(os.environ.get("PPGBP_MC_SUBJECTS", "3"))
    total = exceed = 0
    for seed in range(100, 120):
        errors = []
        for i in range(n_subjects):
            session, _ = generate_session(ProtocolConfig(rng_seed=subject_seed(seed, i)), cohort_subject_id(i))
            subject = prepare_subject(session)
            errors += evaluate_subject(subject, select_models(fit_subject(subject)))[0]
        cells = summarize(errors)
        pred = {(c.kind, c.feature, c.label): c.rmse for c in cells if c.error_type == PREDICTION_ERROR}
        for c in cells:
            if c.error_type == MODEL_ERROR:
                total += 1
                exceed += pred[(c.kind, c.feature, c.label)] >= c.rmse
    assert total == 20 * 33
    assert exceed / total >= 0.90
