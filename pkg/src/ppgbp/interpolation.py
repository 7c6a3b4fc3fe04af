"""Cubic-spline resampling of beat feature series onto a uniform grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .core import BeatFeatureSeries, Feature

__all__ = ["ResampleGrid", "FeatureTrack", "not_a_knot_spline", "spline_resample"]


@dataclass(frozen=True)
class ResampleGrid:
    """Grid points ``start_s + m / sample_rate_hz`` that fall inside ``[start_s, end_s]``."""

    sample_rate_hz: float
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValueError("sample_rate_hz must be positive and finite")
        if not self.end_s > self.start_s:
            raise ValueError("end_s must exceed start_s")


@dataclass(frozen=True)
class FeatureTrack:
    """A feature resampled onto a uniform grid; sample ``m`` sits at ``t0_s + m / rate``."""

    sample_rate_hz: float
    t0_s: float
    values: np.ndarray
    feature: Feature
    start_index: int = 0  # offset of the first sample on the parent grid

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "feature", Feature(self.feature))

    def __len__(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.values.size) / self.sample_rate_hz


def not_a_knot_spline(times, values) -> CubicSpline:
    times = np.asarray(times, dtype=float)
    if times.size < 4:
        raise ValueError(f"not-a-knot spline needs at least 4 knots, got {times.size}")
    return CubicSpline(times, np.asarray(values, dtype=float), bc_type="not-a-knot", extrapolate=False)


def spline_resample(series: BeatFeatureSeries, grid: ResampleGrid) -> FeatureTrack:
    """Interpolate ``series`` at the grid points covered by its knot span.

    Grid points before the first knot or after the last one are dropped
    rather than extrapolated. The returned track keeps the grid phase, so
    tracks resampled onto the same grid line up sample for sample via
    ``start_index``.

    Raises
    ------
    ValueError
        Fewer than 4 knots, or the grid does not overlap the knot span.
    """
    spline = not_a_knot_spline(series.times_s, series.values)
    first, last = float(series.times_s[0]), float(series.times_s[-1])
    lo = max(grid.start_s, first)
    hi = min(grid.end_s, last)
    if hi < lo:
        raise ValueError("resample grid and knot span are disjoint")
    rate = grid.sample_rate_hz
    tol = 1e-9
    m_first = max(0, math.ceil((lo - grid.start_s) * rate - tol))
    m_last = math.floor((hi - grid.start_s) * rate + tol)
    if m_last < m_first:
        raise ValueError("no grid point falls inside the knot span")
    m = np.arange(m_first, m_last + 1)
    t = grid.start_s + m / rate
    # guard the rounding tolerance at both ends so evaluation never leaves the knot span
    t = np.clip(t, first, last)
    values = spline(t)
    return FeatureTrack(rate, grid.start_s + m_first / rate, values, series.feature, int(m_first))
