import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_peaks, brute_prominence, brute_troughs, walk_prominence
from ppgbp.beats import (
    BP_DEFAULT_PARAMS,
    BeatDetectionError,
    PeakDetectionParams,
    detect_peaks,
    detect_troughs_between_peaks,
    extract_bp_features,
    extract_ppg_features,
    local_maxima,
    mean_arterial_pressure,
    peak_prominences,
    ppg_default_params,
)
from ppgbp.core import BeatFeatureSeries, Feature, SignalLabel, UniformSignal


def bp_signal(values, rate=100.0):
    return UniformSignal(rate, values, SignalLabel.BP)


def random_signal(rng, n):
    """Mixed sinusoids plus white noise, the kind of input the detector sees."""
    t = np.arange(n) / 100.0
    x = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        x += rng.uniform(2, 30) * np.sin(2 * np.pi * rng.uniform(0.2, 3.0) * t + rng.uniform(0, 2 * np.pi))
    return x + rng.uniform(0.1, 5.0) * rng.standard_normal(n) + rng.uniform(-50, 100)


class TestProminence:
    def test_two_peak_example(self):
        x = np.array([0.0, 5.0, 2.0, 8.0, 0.0])
        np.testing.assert_array_equal(peak_prominences(x, [1, 3]), [3.0, 8.0])
        assert brute_prominence(x, 1) == 3.0
        peaks = detect_peaks(bp_signal(x), PeakDetectionParams(0.0, 4.0, 1))
        np.testing.assert_array_equal(peaks.indices, [3])
        np.testing.assert_array_equal(peaks.values, [8.0])

    @given(arrays(np.float64, st.integers(3, 40), elements=st.integers(-5, 5).map(float)))
    def test_matches_exhaustive_paths(self, x):
        # small integer alphabets produce plenty of ties and flat tops
        cand = local_maxima(x)
        expected = [brute_prominence(x, i) for i in cand]
        np.testing.assert_array_equal(peak_prominences(x, cand), expected)

    @given(
        arrays(np.float64, st.integers(3, 80), elements=st.integers(-100, 100).map(float)),
        st.integers(-1000, 1000).map(float),
    )
    def test_translation_invariance(self, x, c):
        # integer samples and shifts keep every difference exact, so detection must not change
        params = PeakDetectionParams(float(np.median(x)), 1.0, 3)
        shifted = PeakDetectionParams(params.min_peak_height + c, 1.0, 3)
        base = detect_peaks(bp_signal(x), params).indices
        moved = detect_peaks(bp_signal(x + c), shifted).indices
        np.testing.assert_array_equal(base, moved)


class TestDetectPeaks:
    def test_sinusoid(self):
        t = np.arange(500) / 100.0
        x = 90 + 25 * np.sin(2 * np.pi * 1.2 * t)
        peaks = detect_peaks(bp_signal(x), BP_DEFAULT_PARAMS)
        t_max = (0.25 + np.arange(6)) / 1.2
        assert len(peaks) == 6
        # each peak is the sample (first of a flat pair) closest to the analytic maximum
        np.testing.assert_array_less(np.abs(peaks.times_s - t_max), 0.0051)
        # half a sample off the analytic extremum at worst
        half_sample_drop = 25 * (1 - np.cos(2 * np.pi * 1.2 * 0.005)) + 1e-12
        np.testing.assert_allclose(peaks.values, 115.0, rtol=0, atol=half_sample_drop)

        troughs = detect_troughs_between_peaks(bp_signal(x), peaks)
        t_min = (0.75 + np.arange(5)) / 1.2
        assert len(troughs) == 5
        np.testing.assert_array_less(np.abs(troughs.times_s - t_min), 0.0051)
        np.testing.assert_allclose(troughs.values, 65.0, rtol=0, atol=half_sample_drop)

    @pytest.mark.parametrize("gap, expected", [(30, [10, 40]), (15, [10]), (20, [10, 30]), (19, [10])])
    def test_equal_maxima_distance(self, gap, expected):
        x = np.zeros(80)
        x[10] = x[10 + gap] = 50.0
        peaks = detect_peaks(bp_signal(x), PeakDetectionParams(15, 15, 20))
        np.testing.assert_array_equal(peaks.indices, expected)
        assert brute_peaks(x, 15, 15, 20) == expected

    def test_taller_peak_suppresses_earlier_neighbour(self):
        x = np.zeros(60)
        x[10], x[20], x[30] = 40.0, 50.0, 45.0
        peaks = detect_peaks(bp_signal(x), PeakDetectionParams(0, 1, 15))
        np.testing.assert_array_equal(peaks.indices, [20])

    def test_edges_never_peak(self):
        x = np.array([10.0, 1.0, 3.0, 1.0, 10.0])
        np.testing.assert_array_equal(detect_peaks(bp_signal(x), PeakDetectionParams(0, 0, 1)).indices, [2])

    def test_flat_top_reported_once_at_first_sample(self):
        x = np.array([0.0, 4.0, 4.0, 4.0, 1.0, 2.0, 2.0])
        np.testing.assert_array_equal(local_maxima(x), [1])

    def test_empty_result_and_short_signal(self):
        assert len(detect_peaks(bp_signal(np.full(100, 80.0)), BP_DEFAULT_PARAMS)) == 0
        with pytest.raises(ValueError):
            detect_peaks(bp_signal([1.0, 2.0]), BP_DEFAULT_PARAMS)

    def test_random_signals_match_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            x = random_signal(rng, int(rng.integers(500, 5001)))
            params = PeakDetectionParams(
                float(np.quantile(x, rng.uniform(0.1, 0.9))), float(rng.uniform(0, 20)), int(rng.integers(1, 60))
            )
            got = detect_peaks(bp_signal(x), params).indices.tolist()
            assert got == brute_peaks(x, *_params(params), exhaustive=False)

    @given(
        arrays(np.float64, st.integers(3, 60), elements=st.integers(0, 6).map(float)),
        st.floats(0, 6),
        st.floats(0, 4),
        st.integers(1, 10),
    )
    def test_oracle_on_tie_heavy_signals(self, x, height, prom, dist):
        got = detect_peaks(bp_signal(x), PeakDetectionParams(height, prom, dist)).indices.tolist()
        assert got == brute_peaks(x, height, prom, dist)

    @given(arrays(np.float64, st.integers(3, 300), elements=st.floats(-50, 50)), st.integers(1, 30))
    def test_postconditions(self, x, dist):
        params = PeakDetectionParams(-10.0, 2.0, dist)
        peaks = detect_peaks(bp_signal(x), params)
        idx = peaks.indices
        assert np.all(np.diff(peaks.times_s) > 0)
        assert np.all(peaks.values >= params.min_peak_height)
        assert np.all(np.diff(idx) >= dist)
        assert all(walk_prominence(x.tolist(), i) >= params.min_peak_prominence for i in idx)


def _params(p):
    return p.min_peak_height, p.min_peak_prominence, p.min_peak_distance_samples


class TestTroughs:
    def test_tie_goes_to_earliest(self):
        x = np.array([0.0, 10.0, 4.0, 4.0, 9.0, 0.0])
        sig = bp_signal(x)
        peaks = BeatFeatureSeries([0.01, 0.04], [10.0, 9.0], Feature.SBP, indices=[1, 4])
        troughs = detect_troughs_between_peaks(sig, peaks)
        np.testing.assert_array_equal(troughs.indices, [2])
        assert troughs.feature == Feature.DBP

    def test_peaks_from_times_only(self):
        x = np.array([0.0, 10.0, 4.0, 3.0, 9.0, 0.0])
        peaks = BeatFeatureSeries([0.01, 0.04], [10.0, 9.0], Feature.SBP)
        np.testing.assert_array_equal(detect_troughs_between_peaks(bp_signal(x), peaks).indices, [3])

    def test_needs_two_peaks(self):
        peaks = BeatFeatureSeries([0.01], [10.0], Feature.SBP, indices=[1])
        with pytest.raises(BeatDetectionError):
            detect_troughs_between_peaks(bp_signal([0.0, 10.0, 0.0]), peaks)

    def test_random_smooth_signal_matches_windowed_minima(self, rng):
        t = np.arange(3000) / 100.0
        x = 95 + 22 * np.sin(2 * np.pi * 1.1 * t) + 4 * np.sin(2 * np.pi * 0.13 * t) + 0.3 * rng.standard_normal(t.size)
        sig = bp_signal(x)
        peaks = detect_peaks(sig, BP_DEFAULT_PARAMS)
        troughs = detect_troughs_between_peaks(sig, peaks)
        assert troughs.indices.tolist() == brute_troughs(x.tolist(), peaks.indices.tolist())
        assert np.all((peaks.times_s[:-1] < troughs.times_s) & (troughs.times_s < peaks.times_s[1:]))
        assert np.all(troughs.values <= np.minimum(peaks.values[:-1], peaks.values[1:]))


class TestFeatures:
    def test_map_values(self):
        assert mean_arterial_pressure(120.0, 60.0) == 80.0
        np.testing.assert_allclose(mean_arterial_pressure(126.8, 74.8), 92.13333333333334, rtol=0, atol=1e-12)

    @given(
        arrays(np.float64, 5, elements=st.floats(40, 250)),
        arrays(np.float64, 5, elements=st.floats(20, 150)),
        st.floats(0.1, 10),
    )
    def test_map_linearity(self, sbp, dbp, k):
        np.testing.assert_allclose(mean_arterial_pressure(k * sbp, k * dbp), k * mean_arterial_pressure(sbp, dbp), rtol=1e-12)

    def test_extract_bp_structure(self):
        t = np.arange(2000) / 100.0
        sig = bp_signal(95 + 25 * np.sin(2 * np.pi * 1.2 * t) + 3 * np.sin(2 * np.pi * 0.1 * t))
        sbp, dbp, mean_ap = extract_bp_features(sig)
        assert len(dbp) == len(sbp) - 1 and len(mean_ap) == len(dbp)
        np.testing.assert_array_equal(mean_ap.values, (2 * dbp.values + sbp.values[:-1]) / 3)
        np.testing.assert_array_equal(mean_ap.times_s, dbp.times_s)

    def test_extract_bp_needs_two_beats(self):
        with pytest.raises(BeatDetectionError):
            extract_bp_features(bp_signal(np.full(300, 90.0)))
        with pytest.raises(ValueError):
            extract_bp_features(UniformSignal(100, np.ones(10), SignalLabel.PPG))

    def test_ppg_sinusoid_defaults(self):
        t = np.arange(1000) / 100.0
        ppg = UniformSignal(100, 1.0 + 0.3 * np.sin(2 * np.pi * t), SignalLabel.PPG)
        params = ppg_default_params(ppg)
        assert params.min_peak_distance_samples == 20
        np.testing.assert_allclose(params.min_peak_height, 1.0, atol=1e-12)
        peaks, troughs = extract_ppg_features(ppg)
        assert len(peaks) == 10 and len(troughs) == 9
        assert peaks.feature == Feature.PPG_PEAK and troughs.feature == Feature.PPG_TROUGH

    def test_flat_ppg_raises(self):
        with pytest.raises(BeatDetectionError):
            extract_ppg_features(UniformSignal(100, np.ones(500), SignalLabel.PPG))

    def test_generator_beats_recovered(self, default_session):
        session, truth = default_session
        sbp, dbp, mean_ap = extract_bp_features(session.bp)
        np.testing.assert_array_equal(sbp.times_s, truth.sbp_times_s)
        np.testing.assert_allclose(sbp.values, truth.sbp, atol=0.1)
        np.testing.assert_array_equal(dbp.times_s, truth.dbp_times_s)
        np.testing.assert_allclose(dbp.values, truth.dbp, atol=0.1)
        np.testing.assert_allclose(mean_ap.values, truth.map, atol=0.1)
        peaks, troughs = extract_ppg_features(session.ppg)
        assert len(peaks) == truth.ppg_peak.size
        np.testing.assert_array_equal(peaks.times_s, truth.ppg_peak_times_s)
        np.testing.assert_array_equal(troughs.times_s, truth.ppg_trough_times_s)
