"""Beat detection and BP/PPG feature extraction.

The peak detector follows the common prominence-and-distance conventions,
which the default thresholds assume:

* a candidate is a local maximum with a strictly lower sample on each side;
  a flat top (equal samples between a rise and a fall) counts once, at its
  first sample, and the first and last samples never qualify;
* its prominence is the drop from the peak to the higher of the two lowest
  points separating it from strictly higher terrain (or the signal edge) on
  either side;
* candidates below ``min_peak_height`` or ``min_peak_prominence`` are dropped;
* the survivors are accepted tallest first (earlier index wins a tie) and any
  candidate closer than ``min_peak_distance_samples`` to an accepted peak is
  discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BeatFeatureSeries, Feature, SignalLabel, UniformSignal

__all__ = [
    "BeatDetectionError",
    "PeakDetectionParams",
    "BP_DEFAULT_PARAMS",
    "local_maxima",
    "peak_prominences",
    "select_by_distance",
    "detect_peaks",
    "detect_troughs_between_peaks",
    "ppg_default_params",
    "extract_bp_features",
    "extract_ppg_features",
    "mean_arterial_pressure",
]


class BeatDetectionError(ValueError):
    """Too few beats were found to build the requested feature series."""


@dataclass(frozen=True)
class PeakDetectionParams:
    min_peak_height: float
    min_peak_prominence: float
    min_peak_distance_samples: int

    def __post_init__(self):
        if not (math.isfinite(self.min_peak_height) and math.isfinite(self.min_peak_prominence)):
            raise ValueError("peak height and prominence thresholds must be finite")
        if int(self.min_peak_distance_samples) != self.min_peak_distance_samples:
            raise ValueError("min_peak_distance_samples must be an integer")
        if self.min_peak_distance_samples < 1:
            raise ValueError("min_peak_distance_samples must be >= 1")
        object.__setattr__(self, "min_peak_distance_samples", int(self.min_peak_distance_samples))


# MinPeakHeight 15 mmHg, MinPeakProminence 15 mmHg, MinPeakDistance 20 samples
BP_DEFAULT_PARAMS = PeakDetectionParams(15.0, 15.0, 20)


def local_maxima(x: np.ndarray) -> np.ndarray:
    """Interior local maxima; a flat top is reported at its first sample.

    >>> local_maxima(np.array([0.0, 2.0, 2.0, 1.0, 3.0, 3.0]))
    array([1])
    """
    x = np.asarray(x, dtype=float)
    if x.size < 3:
        return np.zeros(0, dtype=np.int64)
    d = np.diff(x)
    steps = np.flatnonzero(d != 0)
    sign = np.sign(d[steps])
    # a rise followed (after any run of equal samples) by a fall
    return (steps[:-1][(sign[:-1] > 0) & (sign[1:] < 0)] + 1).astype(np.int64)


def _nearest_higher(x: np.ndarray, reverse: bool) -> np.ndarray:
    """For every sample, index of the nearest strictly higher sample on one side.

    -1 (left) or ``len(x)`` (right) marks "none before the edge".
    """
    n = x.size
    out = np.empty(n, dtype=np.int64)
    stack: list[int] = []
    order = range(n - 1, -1, -1) if reverse else range(n)
    none = n if reverse else -1
    values = x.tolist()
    for i in order:
        v = values[i]
        while stack and values[stack[-1]] <= v:
            stack.pop()
        out[i] = stack[-1] if stack else none
        stack.append(i)
    return out


class _RangeMin:
    """Sparse table answering min(x[lo:hi]) in O(1) after O(n log n) setup."""

    def __init__(self, x: np.ndarray):
        self.levels = [np.asarray(x, dtype=float)]
        width = 1
        while 2 * width <= x.size:
            prev = self.levels[-1]
            self.levels.append(np.minimum(prev[:-width], prev[width:]))
            width *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        length = hi - lo
        if np.any(length <= 0):
            raise ValueError("empty range")
        k = np.floor(np.log2(length)).astype(np.int64)
        out = np.empty(lo.size, dtype=float)
        for level in np.unique(k):
            sel = k == level
            table = self.levels[level]
            out[sel] = np.minimum(table[lo[sel]], table[hi[sel] - (1 << level)])
        return out


def peak_prominences(x, peaks) -> np.ndarray:
    """Topographic prominence of each index in ``peaks``."""
    x = np.asarray(x, dtype=float)
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size == 0:
        return np.zeros(0)
    left_higher = _nearest_higher(x, reverse=False)[peaks]
    right_higher = _nearest_higher(x, reverse=True)[peaks]
    rmq = _RangeMin(x)
    # the saddle range runs from just after the higher sample (or the edge) to the peak
    left_base = rmq.query(left_higher + 1, peaks + 1)
    right_base = rmq.query(peaks, right_higher)
    return x[peaks] - np.maximum(left_base, right_base)


def select_by_distance(peaks, heights, distance: int) -> np.ndarray:
    """Greedy tallest-first thinning; returns a boolean keep mask aligned with ``peaks``.

    ``peaks`` must be sorted ascending.
    """
    peaks = np.asarray(peaks, dtype=np.int64)
    heights = np.asarray(heights, dtype=float)
    keep = np.ones(peaks.size, dtype=bool)
    if distance <= 1 or peaks.size < 2:
        return keep
    # tallest first; np.lexsort is stable so equal heights keep index order
    priority = np.lexsort((peaks, -heights))
    pos = peaks.tolist()
    for i in priority.tolist():
        if not keep[i]:
            continue
        j = i - 1
        while j >= 0 and pos[i] - pos[j] < distance:
            keep[j] = False
            j -= 1
        j = i + 1
        while j < peaks.size and pos[j] - pos[i] < distance:
            keep[j] = False
            j += 1
    return keep


def _feature_for(signal: UniformSignal, trough: bool) -> Feature:
    if signal.label == SignalLabel.BP:
        return Feature.DBP if trough else Feature.SBP
    return Feature.PPG_TROUGH if trough else Feature.PPG_PEAK


def _series_from_indices(signal: UniformSignal, idx: np.ndarray, feature: Feature) -> BeatFeatureSeries:
    idx = np.asarray(idx, dtype=np.int64)
    times = signal.t0_s + idx / signal.sample_rate_hz
    return BeatFeatureSeries(times, signal.values[idx], feature, indices=idx)


def detect_peaks(signal: UniformSignal, params: PeakDetectionParams) -> BeatFeatureSeries:
    """Detect beats as thresholded, prominence-filtered, distance-pruned maxima.

    Returns an empty series when nothing qualifies.

    Raises
    ------
    ValueError
        If the signal has fewer than 3 samples.
    """
    x = signal.values
    if x.size < 3:
        raise ValueError("peak detection needs at least 3 samples")
    cand = local_maxima(x)
    if cand.size:
        prom = peak_prominences(x, cand)
        cand = cand[(x[cand] >= params.min_peak_height) & (prom >= params.min_peak_prominence)]
    if cand.size:
        cand = cand[select_by_distance(cand, x[cand], params.min_peak_distance_samples)]
    return _series_from_indices(signal, cand, _feature_for(signal, trough=False))


def _peak_indices(signal: UniformSignal, peaks: BeatFeatureSeries) -> np.ndarray:
    if peaks.indices is not None:
        return np.asarray(peaks.indices, dtype=np.int64)
    pos = (peaks.times_s - signal.t0_s) * signal.sample_rate_hz
    idx = np.rint(pos).astype(np.int64)
    if np.any(np.abs(pos - idx) > 1e-6) or np.any(idx < 0) or np.any(idx >= len(signal)):
        raise ValueError("peak times do not fall on the signal's sample grid")
    return idx


def detect_troughs_between_peaks(signal: UniformSignal, peaks: BeatFeatureSeries) -> BeatFeatureSeries:
    """Minimum strictly between each pair of consecutive peaks (earliest on ties)."""
    if len(peaks) < 2:
        raise BeatDetectionError("trough detection needs at least 2 peaks")
    idx = _peak_indices(signal, peaks)
    x = signal.values
    troughs = np.empty(idx.size - 1, dtype=np.int64)
    for k, (lo, hi) in enumerate(zip(idx[:-1].tolist(), idx[1:].tolist())):
        if hi - lo < 2:
            raise ValueError(f"peaks at samples {lo} and {hi} leave no room for a trough")
        troughs[k] = lo + 1 + int(np.argmin(x[lo + 1:hi]))
    return _series_from_indices(signal, troughs, _feature_for(signal, trough=True))


def ppg_default_params(
    ppg: UniformSignal,
    prominence_iqr_fraction: float = 0.5,
    distance_samples: int = 20,
) -> PeakDetectionParams:
    """Data-driven PPG thresholds: height at the median, prominence a fraction of the IQR."""
    q25, q50, q75 = np.percentile(ppg.values, [25, 50, 75])
    return PeakDetectionParams(float(q50), float(prominence_iqr_fraction * (q75 - q25)), distance_samples)


def mean_arterial_pressure(sbp, dbp):
    """MAP = (2 DBP + SBP) / 3, elementwise."""
    return (2.0 * np.asarray(dbp, dtype=float) + np.asarray(sbp, dtype=float)) / 3.0


def extract_bp_features(
    bp: UniformSignal, params: PeakDetectionParams | None = None
) -> tuple[BeatFeatureSeries, BeatFeatureSeries, BeatFeatureSeries]:
    """SBP peaks, DBP troughs between them, and MAP from each DBP and the SBP before it.

    MAP points carry the DBP timestamps.
    """
    if bp.label != SignalLabel.BP:
        raise ValueError(f"expected a BP signal, got {bp.label.value}")
    sbp = detect_peaks(bp, params or BP_DEFAULT_PARAMS)
    if len(sbp) < 2:
        raise BeatDetectionError(f"found {len(sbp)} systolic peaks; need at least 2")
    dbp = detect_troughs_between_peaks(bp, sbp)
    map_values = mean_arterial_pressure(sbp.values[:-1], dbp.values)
    mean_ap = BeatFeatureSeries(dbp.times_s, map_values, Feature.MAP, indices=dbp.indices)
    return sbp, dbp, mean_ap


def extract_ppg_features(
    ppg: UniformSignal, params: PeakDetectionParams | None = None
) -> tuple[BeatFeatureSeries, BeatFeatureSeries]:
    if ppg.label != SignalLabel.PPG:
        raise ValueError(f"expected a PPG signal, got {ppg.label.value}")
    peaks = detect_peaks(ppg, params or ppg_default_params(ppg))
    if len(peaks) < 2:
        raise BeatDetectionError(f"found {len(peaks)} PPG peaks; need at least 2")
    troughs = detect_troughs_between_peaks(ppg, peaks)
    return peaks, troughs
