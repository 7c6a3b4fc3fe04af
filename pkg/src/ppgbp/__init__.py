"""Continuous blood-pressure estimation from PPG beat features with interval-wise ARX models."""

from .arx import (
    ArxModel,
    ArxOrders,
    ModelSelectionResult,
    OrderBounds,
    fit_arx,
    grid_search,
    one_step_predict,
    simulate_free_run,
)
from .beats import PeakDetectionParams, detect_peaks, extract_bp_features, extract_ppg_features
from .core import (
    BeatFeatureSeries,
    Feature,
    IntervalAnnotation,
    IntervalKind,
    RecordingSession,
    SignalLabel,
    UniformSignal,
    load_session,
    save_session,
    validate_session,
)
from .evaluation import ErrorReport, ErrorSeries, cross_prediction_matrix, model_error_series, rmse
from .interpolation import FeatureTrack, ResampleGrid, spline_resample
from .pipeline import DetectionConfig, evaluate_subject, fit_subject, prepare_subject, select_models
from .synth import GroundTruth, ProtocolConfig, generate_session

__version__ = "0.1.0"
