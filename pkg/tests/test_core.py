import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppgbp.core import (
    BeatFeatureSeries,
    Feature,
    IntervalAnnotation,
    IntervalKind,
    RecordingSession,
    SignalLabel,
    UniformSignal,
    load_session,
    read_annotations_csv,
    read_recording_csv,
    save_session,
    validate_session,
    write_annotations_csv,
)


def make_session(n=1000, rate=100.0, anns=None, ppg_n=None):
    t = np.arange(n) / rate
    bp = UniformSignal(rate, 90 + 25 * np.sin(2 * np.pi * 1.2 * t), SignalLabel.BP)
    ppg = UniformSignal(rate, 1 + 0.2 * np.sin(2 * np.pi * 1.2 * t[: ppg_n or n]), SignalLabel.PPG)
    if anns is None:
        anns = (IntervalAnnotation("NB1", "NB", 0.0, 4.0), IntervalAnnotation("BH1", "BH", 4.0, 9.0))
    return RecordingSession("S01", bp, ppg, anns)


class TestTypes:
    def test_uniform_signal_is_read_only(self):
        sig = UniformSignal(100, [1.0, 2.0, 3.0], "BP")
        with pytest.raises(ValueError):
            sig.values[0] = 5.0
        assert sig.label is SignalLabel.BP
        np.testing.assert_allclose(sig.times, [0.0, 0.01, 0.02])
        assert sig.end_s == pytest.approx(0.03)

    @pytest.mark.parametrize(
        "rate, values",
        [(0, [1.0]), (-100, [1.0]), (np.inf, [1.0]), (100, []), (100, [1.0, np.nan])],
    )
    def test_uniform_signal_rejects_bad_input(self, rate, values):
        with pytest.raises(ValueError):
            UniformSignal(rate, values, "PPG")

    def test_beat_series_requires_increasing_times(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            BeatFeatureSeries([0.0, 1.0, 1.0], [1, 2, 3], Feature.SBP)
        with pytest.raises(ValueError):
            BeatFeatureSeries([0.0, 1.0], [1.0], Feature.SBP)

    def test_annotation_half_open(self):
        ann = IntervalAnnotation("BH1", IntervalKind.BH, 1.0, 2.0)
        np.testing.assert_array_equal(ann.contains([0.999, 1.0, 1.5, 2.0]), [False, True, True, False])
        nxt = IntervalAnnotation("NB2", "NB", 2.0, 3.0)
        assert not ann.overlaps(nxt)
        assert ann.overlaps(IntervalAnnotation("X", "NB", 1.9, 3.0))
        with pytest.raises(ValueError):
            IntervalAnnotation("bad", "NB", 2.0, 2.0)
        with pytest.raises(ValueError):
            IntervalAnnotation("bad", "XX", 0.0, 1.0)


class TestValidateSession:
    def test_valid_session(self):
        assert validate_session(make_session()) == []

    def test_length_mismatch(self):
        problems = validate_session(make_session(ppg_n=999))
        assert any("length mismatch" in p for p in problems)

    def test_overlap(self):
        anns = (IntervalAnnotation("BH1", "BH", 1.0, 5.0), IntervalAnnotation("NB2", "NB", 4.0, 8.0))
        problems = validate_session(make_session(anns=anns))
        assert problems == ["overlap between annotations BH1 and NB2"]

    def test_annotation_outside_span_and_duplicates(self):
        anns = (IntervalAnnotation("NB1", "NB", 0.0, 4.0), IntervalAnnotation("NB1", "NB", 5.0, 10.5))
        problems = validate_session(make_session(anns=anns))
        assert any("duplicate" in p for p in problems)
        assert any("outside signal span" in p for p in problems)

    def test_rate_and_start_mismatch(self):
        s = make_session()
        ppg = UniformSignal(50.0, s.ppg.values, "PPG", t0_s=1.0)
        problems = validate_session(RecordingSession("S01", s.bp, ppg, ()))
        assert any("sample rate mismatch" in p for p in problems)
        assert any("start time mismatch" in p for p in problems)

    def test_does_not_mutate(self):
        s = make_session()
        before = (s.bp.values.copy(), s.annotations)
        validate_session(s)
        np.testing.assert_array_equal(s.bp.values, before[0])
        assert s.annotations == before[1]


class TestCsv:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        n = 777
        bp = UniformSignal(100.0, 80 + 20 * rng.standard_normal(n), "BP")
        ppg = UniformSignal(100.0, rng.standard_normal(n) * 1e-3, "PPG")
        anns = (IntervalAnnotation("NB1", "NB", 0.0, 3.3), IntervalAnnotation("BH1", "BH", 3.3, 7.77))
        session = RecordingSession("P7", bp, ppg, anns)
        save_session(session, tmp_path)
        back = load_session(tmp_path, "P7")
        assert back == session
        assert back.bp.sample_rate_hz == 100.0

    def test_header_and_line_endings(self, tmp_path):
        rec, ann = save_session(make_session(n=20), tmp_path)
        raw = rec.read_bytes()
        assert raw.startswith(b"t_s,ppg,bp\n")
        assert b"\r" not in raw
        assert ann.read_text().splitlines()[0] == "label,kind,start_s,end_s"

    def test_uneven_spacing_rejected(self, tmp_path):
        path = tmp_path / "x_recording.csv"
        path.write_text("t_s,ppg,bp\n0.0,1,80\n0.01,1,80\n0.03,1,80\n")
        with pytest.raises(ValueError, match="evenly spaced"):
            read_recording_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "x_recording.csv"
        path.write_text("time,a,b\n0,1,2\n0.01,1,2\n")
        with pytest.raises(ValueError, match="header"):
            read_recording_csv(path)

    def test_annotations_round_trip(self, tmp_path):
        anns = (IntervalAnnotation("NB1", "NB", 0.0, 60.0), IntervalAnnotation("BH1", "BH", 60.0, 91.123456789))
        write_annotations_csv(anns, tmp_path / "a.csv")
        assert read_annotations_csv(tmp_path / "a.csv") == anns

    @given(
        rate=st.sampled_from([50.0, 100.0, 125.0, 250.0, 1000.0]),
        t0=st.floats(0, 1000, allow_nan=False),
        values=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=60),
    )
    def test_round_trip_property(self, tmp_path_factory, rate, t0, values):
        d = tmp_path_factory.mktemp("rt")
        bp = UniformSignal(rate, values, "BP", t0)
        ppg = UniformSignal(rate, values[::-1], "PPG", t0)
        save_session(RecordingSession("Q", bp, ppg, ()), d)
        back = load_session(d, "Q")
        np.testing.assert_array_equal(back.bp.values, bp.values)
        np.testing.assert_array_equal(back.ppg.values, ppg.values)
        assert back.bp.sample_rate_hz == rate
        assert back.bp.t0_s == t0
