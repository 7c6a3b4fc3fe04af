"""Per-subject orchestration: features -> uniform tracks -> interval fits -> errors."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .arx import ArxModel, IntervalTooShortError, ModelSelectionResult, OrderBounds, grid_search
from .beats import (
    BP_DEFAULT_PARAMS,
    PeakDetectionParams,
    extract_bp_features,
    extract_ppg_features,
)
from .core import Feature, IntervalAnnotation, IntervalKind, RecordingSession
from .evaluation import (
    ErrorSeries,
    cross_prediction_matrix,
    model_error_series,
)
from .interpolation import FeatureTrack, ResampleGrid, spline_resample

log = logging.getLogger(__name__)

__all__ = [
    "DetectionConfig",
    "IntervalData",
    "SubjectData",
    "prepare_subject",
    "fit_subject",
    "evaluate_subject",
    "MODELLED_FEATURES",
]

MODELLED_FEATURES = (Feature.SBP, Feature.DBP)
DEFAULT_RATE_HZ = 100.0


@dataclass(frozen=True)
class DetectionConfig:
    bp: PeakDetectionParams = BP_DEFAULT_PARAMS
    ppg_prominence_mode: str = "iqr"  # "iqr" or "absolute"
    ppg_prominence_iqr_fraction: float = 0.5
    ppg_prominence: float | None = None
    ppg_height: float | None = None  # None: median of the recording
    ppg_distance_samples: int = 20

    def __post_init__(self):
        if self.ppg_prominence_mode not in ("iqr", "absolute"):
            raise ValueError(f"ppg.prominence_mode must be 'iqr' or 'absolute', got {self.ppg_prominence_mode!r}")
        if self.ppg_prominence_mode == "absolute" and self.ppg_prominence is None:
            raise ValueError("ppg.prominence is required when ppg.prominence_mode is 'absolute'")

    def ppg_params(self, values) -> PeakDetectionParams:
        q25, q50, q75 = np.percentile(values, [25, 50, 75])
        height = float(q50) if self.ppg_height is None else float(self.ppg_height)
        if self.ppg_prominence_mode == "iqr":
            prominence = float(self.ppg_prominence_iqr_fraction * (q75 - q25))
        else:
            prominence = float(self.ppg_prominence)
        return PeakDetectionParams(height, prominence, self.ppg_distance_samples)

    def to_dict(self) -> dict:
        return {
            "bp.height_mmhg": self.bp.min_peak_height,
            "bp.prominence_mmhg": self.bp.min_peak_prominence,
            "bp.distance_samples": self.bp.min_peak_distance_samples,
            "ppg.prominence_mode": self.ppg_prominence_mode,
            "ppg.prominence_iqr_fraction": self.ppg_prominence_iqr_fraction,
            "ppg.prominence": self.ppg_prominence,
            "ppg.height": self.ppg_height,
            "ppg.distance_samples": self.ppg_distance_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DetectionConfig:
        bp = PeakDetectionParams(
            float(d.get("bp.height_mmhg", BP_DEFAULT_PARAMS.min_peak_height)),
            float(d.get("bp.prominence_mmhg", BP_DEFAULT_PARAMS.min_peak_prominence)),
            int(d.get("bp.distance_samples", BP_DEFAULT_PARAMS.min_peak_distance_samples)),
        )
        opt = lambda key: None if d.get(key) in (None, "", "none") else float(d[key])  # noqa: E731
        return cls(
            bp=bp,
            ppg_prominence_mode=str(d.get("ppg.prominence_mode", "iqr")),
            ppg_prominence_iqr_fraction=float(d.get("ppg.prominence_iqr_fraction", 0.5)),
            ppg_prominence=opt("ppg.prominence"),
            ppg_height=opt("ppg.height"),
            ppg_distance_samples=int(d.get("ppg.distance_samples", 20)),
        )


@dataclass(frozen=True)
class IntervalData:
    """Aligned feature tracks restricted to one annotation window."""

    annotation: IntervalAnnotation
    start_index: int  # first sample on the session grid
    sbp: np.ndarray
    dbp: np.ndarray
    ppg_peak: np.ndarray
    ppg_trough: np.ndarray

    @property
    def label(self) -> str:
        return self.annotation.label

    @property
    def kind(self) -> IntervalKind:
        return self.annotation.kind

    def __len__(self) -> int:
        return self.sbp.size

    def track(self, feature):
        """``(y, u)`` for SBP/DBP; ``((y_sbp, u_sbp), (y_dbp, u_dbp))`` for MAP."""
        feature = Feature(feature)
        if feature == Feature.SBP:
            return self.sbp, self.ppg_peak
        if feature == Feature.DBP:
            return self.dbp, self.ppg_trough
        if feature == Feature.MAP:
            return (self.sbp, self.ppg_peak), (self.dbp, self.ppg_trough)
        raise ValueError(f"no track for {feature.value}")


@dataclass(frozen=True)
class SubjectData:
    subject_id: str
    features: dict  # Feature -> BeatFeatureSeries
    tracks: dict  # Feature -> FeatureTrack on the session grid
    intervals: dict  # label -> IntervalData, in annotation order
    warnings: tuple = ()


def _window_indices(ann: IntervalAnnotation, t0: float, rate: float) -> tuple[int, int]:
    # half-open [start, end) mapped to sample indices, tolerant to float rounding
    tol = 1e-9
    lo = math.ceil((ann.start_s - t0) * rate - tol)
    hi = math.ceil((ann.end_s - t0) * rate - tol)
    return lo, hi


def prepare_subject(session: RecordingSession, detection: DetectionConfig | None = None) -> SubjectData:
    """Extract beat features, resample them over the whole record, and cut per-interval tracks.

    Intervals are trimmed to the span where all four feature tracks exist;
    an interval left empty is dropped with a warning.
    """
    detection = detection or DetectionConfig()
    notes = []
    rate = session.bp.sample_rate_hz
    if rate != DEFAULT_RATE_HZ:
        msg = f"{session.subject_id}: sample rate {rate} Hz differs from the 100 Hz the default parameters assume"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    sbp, dbp, mean_ap = extract_bp_features(session.bp, detection.bp)
    ppg_peak, ppg_trough = extract_ppg_features(session.ppg, detection.ppg_params(session.ppg.values))
    features = {
        Feature.SBP: sbp,
        Feature.DBP: dbp,
        Feature.MAP: mean_ap,
        Feature.PPG_PEAK: ppg_peak,
        Feature.PPG_TROUGH: ppg_trough,
    }
    grid = ResampleGrid(rate, session.bp.t0_s, session.bp.t0_s + (len(session.bp) - 1) / rate)
    tracks: dict[Feature, FeatureTrack] = {
        f: spline_resample(features[f], grid)
        for f in (Feature.SBP, Feature.DBP, Feature.PPG_PEAK, Feature.PPG_TROUGH)
    }
    common_lo = max(t.start_index for t in tracks.values())
    common_hi = min(t.start_index + len(t) for t in tracks.values())

    def cut(f: Feature, lo: int, hi: int) -> np.ndarray:
        tr = tracks[f]
        arr = np.array(tr.values[lo - tr.start_index:hi - tr.start_index])
        arr.flags.writeable = False
        return arr

    intervals = {}
    for ann in session.annotations:
        lo, hi = _window_indices(ann, session.bp.t0_s, rate)
        lo, hi = max(lo, common_lo), min(hi, common_hi)
        if hi <= lo:
            msg = f"{session.subject_id} {ann.label}: no samples inside the beat span; interval dropped"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            continue
        intervals[ann.label] = IntervalData(
            ann,
            lo,
            cut(Feature.SBP, lo, hi),
            cut(Feature.DBP, lo, hi),
            cut(Feature.PPG_PEAK, lo, hi),
            cut(Feature.PPG_TROUGH, lo, hi),
        )
    return SubjectData(session.subject_id, features, tracks, intervals, tuple(notes))


@dataclass
class FitOutcome:
    results: dict = field(default_factory=dict)  # (Feature, label) -> ModelSelectionResult
    failures: dict = field(default_factory=dict)  # (Feature, label) -> message


def fit_subject(
    subject: SubjectData,
    bounds: OrderBounds | None = None,
    features=MODELLED_FEATURES,
) -> FitOutcome:
    """Grid-search an ARX model for every (feature, interval); failures are recorded, not raised."""
    outcome = FitOutcome()
    for label, data in subject.intervals.items():
        for feature in features:
            y, u = data.track(feature)
            try:
                outcome.results[(Feature(feature), label)] = grid_search(y, u, bounds)
            except (IntervalTooShortError, ValueError, np.linalg.LinAlgError) as exc:
                msg = f"{subject.subject_id} {Feature(feature).value} {label}: {exc}"
                log.warning(msg)
                outcome.failures[(Feature(feature), label)] = msg
    return outcome


def select_models(outcome: FitOutcome, selection: str = "mse") -> dict:
    """(Feature, label) -> chosen ArxModel."""
    return {key: res.best(selection) for key, res in outcome.results.items()}


def evaluate_subject(
    subject: SubjectData,
    models: dict,
    mode: str = "free-run",
) -> tuple[list[ErrorSeries], list[str]]:
    """Model errors and cross-interval prediction errors for SBP, DBP and MAP.

    ``models`` maps ``(Feature, label)`` to the chosen :class:`ArxModel`. MAP
    estimates combine the SBP and DBP estimates of the same source interval.
    Returns the error series and a list of warnings about skipped cases.
    """
    errors: list[ErrorSeries] = []
    notes: list[str] = []
    sid = subject.subject_id

    def model_for(feature: Feature, label: str):
        if feature == Feature.MAP:
            pair = (models.get((Feature.SBP, label)), models.get((Feature.DBP, label)))
            return pair if None not in pair else None
        return models.get((feature, label))

    for label, data in subject.intervals.items():
        for feature in (Feature.SBP, Feature.DBP, Feature.MAP):
            model = model_for(feature, label)
            if model is None:
                notes.append(f"{sid} {feature.value} {label}: no model; model error skipped")
                continue
            try:
                track = data.track(feature)
                if feature == Feature.MAP:
                    series = model_error_series(model, track, None, feature, label, mode, sid, data.kind)
                else:
                    series = model_error_series(model, track[0], track[1], feature, label, mode, sid, data.kind)
            except (ValueError, ArithmeticError) as exc:
                notes.append(f"{sid} {feature.value} {label}: model error skipped: {exc}")
                continue
            errors.append(series)

    for kind in (IntervalKind.BH, IntervalKind.NB):
        labels = [lb for lb, d in subject.intervals.items() if d.kind == kind]
        kinds = {lb: kind for lb in labels}
        for feature in (Feature.SBP, Feature.DBP, Feature.MAP):
            feat_models = {lb: m for lb in labels if (m := model_for(feature, lb)) is not None}
            feat_tracks = {lb: subject.intervals[lb].track(feature) for lb in feat_models}
            if len(feat_models) < 2:
                notes.append(f"{sid} {feature.value} {kind.value}: fewer than 2 models; prediction errors skipped")
                continue
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                errors.extend(
                    cross_prediction_matrix(feat_models, feat_tracks, kind, feature, mode, sid, kinds)
                )
            notes.extend(str(w.message) for w in caught)
    return errors, notes
