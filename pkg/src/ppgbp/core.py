"""Shared domain types, session validation and CSV (de)serialization.

Recording CSV layout::

    t_s,ppg,bp
    0.0,1.02,74.8
    0.01,1.03,75.1
    ...

Annotation CSV layout::

    label,kind,start_s,end_s
    NB1,NB,0.0,60.0
    BH1,BH,60.0,91.5

Floats are written with ``repr`` so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SignalLabel",
    "Feature",
    "IntervalKind",
    "UniformSignal",
    "BeatFeatureSeries",
    "IntervalAnnotation",
    "RecordingSession",
    "validate_session",
    "write_recording_csv",
    "read_recording_csv",
    "write_annotations_csv",
    "read_annotations_csv",
    "save_session",
    "load_session",
]

RECORDING_HEADER = ("t_s", "ppg", "bp")
ANNOTATION_HEADER = ("label", "kind", "start_s", "end_s")


class SignalLabel(str, enum.Enum):
    BP = "BP"
    PPG = "PPG"


class Feature(str, enum.Enum):
    SBP = "SBP"
    DBP = "DBP"
    MAP = "MAP"
    PPG_PEAK = "PPG_PEAK"
    PPG_TROUGH = "PPG_TROUGH"


class IntervalKind(str, enum.Enum):
    NB = "NB"
    BH = "BH"


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class UniformSignal:
    """Evenly sampled waveform; sample ``m`` sits at ``t0_s + m / sample_rate_hz``."""

    sample_rate_hz: float
    values: np.ndarray
    label: SignalLabel
    t0_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, "values"))
        object.__setattr__(self, "label", SignalLabel(self.label))
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "t0_s", float(self.t0_s))
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValueError("sample_rate_hz must be positive and finite")
        if self.values.size == 0:
            raise ValueError("values must be non-empty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    def __len__(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.values.size) / self.sample_rate_hz

    @property
    def end_s(self) -> float:
        """Exclusive end of the covered span (one sample period past the last sample)."""
        return self.t0_s + self.values.size / self.sample_rate_hz

    def __eq__(self, other):
        if not isinstance(other, UniformSignal):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.t0_s == other.t0_s
            and self.label == other.label
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class BeatFeatureSeries:
    """Non-uniform (time, value) event series such as SBP points or PPG peaks.

    ``indices`` holds the sample index of each event in the source signal when
    the series came out of a detector; it is ``None`` for hand-built series.
    """

    times_s: np.ndarray
    values: np.ndarray
    feature: Feature
    indices: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "times_s", _frozen_array(self.times_s, "times_s"))
        object.__setattr__(self, "values", _frozen_array(self.values, "values"))
        object.__setattr__(self, "feature", Feature(self.feature))
        if self.indices is not None:
            idx = np.array(self.indices, dtype=np.int64)
            idx.flags.writeable = False
            object.__setattr__(self, "indices", idx)
            if idx.size != self.times_s.size:
                raise ValueError("indices and times_s must have equal length")
        if self.times_s.size != self.values.size:
            raise ValueError("times_s and values must have equal length")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.times_s))):
            raise ValueError("times_s and values must be finite")
        if np.any(np.diff(self.times_s) <= 0):
            raise ValueError("times_s must be strictly increasing")

    def __len__(self) -> int:
        return self.times_s.size

    def __eq__(self, other):
        if not isinstance(other, BeatFeatureSeries):
            return NotImplemented
        same_idx = (self.indices is None and other.indices is None) or (
            self.indices is not None
            and other.indices is not None
            and np.array_equal(self.indices, other.indices)
        )
        return (
            self.feature == other.feature
            and same_idx
            and np.array_equal(self.times_s, other.times_s)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class IntervalAnnotation:
    """Half-open analysis window ``[start_s, end_s)``."""

    label: str
    kind: IntervalKind
    start_s: float
    end_s: float

    def __post_init__(self):
        object.__setattr__(self, "kind", IntervalKind(self.kind))
        object.__setattr__(self, "start_s", float(self.start_s))
        object.__setattr__(self, "end_s", float(self.end_s))
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValueError(f"annotation {self.label}: bounds must be finite")
        if not self.end_s > self.start_s:
            raise ValueError(f"annotation {self.label}: end_s must exceed start_s")

    def overlaps(self, other: IntervalAnnotation) -> bool:
        return self.start_s < other.end_s and other.start_s < self.end_s

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (t >= self.start_s) & (t < self.end_s)


@dataclass(frozen=True)
class RecordingSession:
    subject_id: str
    bp: UniformSignal
    ppg: UniformSignal
    annotations: tuple[IntervalAnnotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def annotation(self, label: str) -> IntervalAnnotation:
        for ann in self.annotations:
            if ann.label == label:
                return ann
        raise KeyError(label)


def validate_session(session: RecordingSession) -> list[str]:
    """Check cross-field invariants of a session.

    Returns a list of human-readable violations; an empty list means the
    session is valid. The session is never modified.
    """
    problems = []
    bp, ppg = session.bp, session.ppg
    if bp.label != SignalLabel.BP:
        problems.append(f"bp signal labelled {bp.label.value}")
    if ppg.label != SignalLabel.PPG:
        problems.append(f"ppg signal labelled {ppg.label.value}")
    if bp.sample_rate_hz != ppg.sample_rate_hz:
        problems.append(
            f"sample rate mismatch: bp {bp.sample_rate_hz} Hz vs ppg {ppg.sample_rate_hz} Hz"
        )
    if bp.t0_s != ppg.t0_s:
        problems.append(f"start time mismatch: bp {bp.t0_s} s vs ppg {ppg.t0_s} s")
    if len(bp) != len(ppg):
        problems.append(f"length mismatch: bp {len(bp)} samples vs ppg {len(ppg)} samples")

    span_start = max(bp.t0_s, ppg.t0_s)
    span_end = min(bp.end_s, ppg.end_s)
    labels = [a.label for a in session.annotations]
    for label in sorted({lb for lb in labels if labels.count(lb) > 1}):
        problems.append(f"duplicate annotation label {label}")
    for ann in session.annotations:
        if ann.start_s < span_start or ann.end_s > span_end:
            problems.append(
                f"annotation {ann.label} [{ann.start_s}, {ann.end_s}) outside signal span "
                f"[{span_start}, {span_end})"
            )
    anns = sorted(session.annotations, key=lambda a: (a.start_s, a.end_s, a.label))
    for i, first in enumerate(anns):
        for second in anns[i + 1:]:
            if second.start_s >= first.end_s:
                break
            problems.append(f"overlap between annotations {first.label} and {second.label}")
    return problems


def _infer_rate(times: np.ndarray) -> float:
    raw = (times.size - 1) / (times[-1] - times[0])
    # shortest decimal that reproduces the spacing; 100.0 rather than 99.99999999999999
    for digits in range(1, 18):
        candidate = float(f"{raw:.{digits}g}")
        if abs(candidate - raw) <= 1e-9 * raw:
            return candidate
    return raw


def write_recording_csv(session: RecordingSession, path) -> None:
    bp, ppg = session.bp, session.ppg
    if len(bp) != len(ppg) or bp.sample_rate_hz != ppg.sample_rate_hz or bp.t0_s != ppg.t0_s:
        raise ValueError("bp and ppg must share sample grid to be written together")
    times = bp.times
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RECORDING_HEADER) + "\n")
        fh.writelines(
            f"{t!r},{p!r},{b!r}\n"
            for t, p, b in zip(times.tolist(), ppg.values.tolist(), bp.values.tolist())
        )


def read_recording_csv(path) -> tuple[UniformSignal, UniformSignal]:
    """Read a recording CSV and return ``(bp, ppg)`` signals."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if tuple(h.strip() for h in header.split(",")) != RECORDING_HEADER:
            raise ValueError(f"{path}: expected header {','.join(RECORDING_HEADER)}, got {header!r}")
        data = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
    if data.shape[0] < 2 or data.shape[1] != 3:
        raise ValueError(f"{path}: need at least two rows of three columns")
    times = data[:, 0]
    if np.any(np.diff(times) <= 0):
        raise ValueError(f"{path}: t_s must be strictly increasing")
    rate = _infer_rate(times)
    t0 = float(times[0])
    expected = t0 + np.arange(times.size) / rate
    if np.max(np.abs(expected - times)) > 1e-6 / rate:
        raise ValueError(f"{path}: samples are not evenly spaced")
    bp = UniformSignal(rate, data[:, 2], SignalLabel.BP, t0)
    ppg = UniformSignal(rate, data[:, 1], SignalLabel.PPG, t0)
    return bp, ppg


def write_annotations_csv(annotations: Sequence[IntervalAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for ann in annotations:
            writer.writerow([ann.label, ann.kind.value, repr(ann.start_s), repr(ann.end_s)])


def read_annotations_csv(path) -> tuple[IntervalAnnotation, ...]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise ValueError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        anns = []
        for row in reader:
            if not row:
                continue
            label, kind, start, end = (c.strip() for c in row)
            anns.append(IntervalAnnotation(label, kind, float(start), float(end)))
    return tuple(anns)


def session_paths(directory, subject_id: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return (
        directory / f"{subject_id}_recording.csv",
        directory / f"{subject_id}_annotations.csv",
    )


def save_session(session: RecordingSession, directory) -> tuple[Path, Path]:
    rec_path, ann_path = session_paths(directory, session.subject_id)
    rec_path.parent.mkdir(parents=True, exist_ok=True)
    write_recording_csv(session, rec_path)
    write_annotations_csv(session.annotations, ann_path)
    return rec_path, ann_path


def load_session(directory, subject_id: str) -> RecordingSession:
    rec_path, ann_path = session_paths(directory, subject_id)
    bp, ppg = read_recording_csv(rec_path)
    anns = read_annotations_csv(ann_path) if ann_path.exists() else ()
    return RecordingSession(subject_id, bp, ppg, anns)
