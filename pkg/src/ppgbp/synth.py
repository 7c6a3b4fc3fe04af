"""Synthetic breath-hold recordings with a known PPG -> BP coupling.

Timeline: a normal-breathing baseline, then ``n_breath_holds`` holds of random
length separated by fixed recovery periods, then a final normal-breathing
period. Each normal-breathing stretch and each hold becomes one annotation
(NB1, BH1, NB2, ..., BH5, NB6 for the defaults).

Construction, all on the output sample grid:

1. a relative envelope ramps up during each hold and relaxes afterwards,
   plus slow band-limited excitation so the coupling stays identifiable;
2. PPG peak and trough envelopes follow it (troughs at reduced gain);
3. SBP and DBP tracks are the envelopes passed through the configured ARX
   coupling, whose input gain is scaled per interval by a small random
   factor (interval-to-interval physiological drift);
4. beats are scheduled on whole samples, beat values are the tracks at
   those samples plus Gaussian beat noise, and each beat is drawn as
   raised-cosine half waves between its diastolic and systolic values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter, lfilter_zi

from .arx import ArxModel, ArxOrders
from .beats import mean_arterial_pressure
from .core import (
    IntervalAnnotation,
    IntervalKind,
    RecordingSession,
    SignalLabel,
    UniformSignal,
)

__all__ = [
    "ConfigError",
    "ProtocolConfig",
    "GroundTruth",
    "generate_session",
    "protocol_annotations",
    "subject_seed",
    "cohort_subject_id",
    "write_ground_truth",
]


class ConfigError(ValueError):
    """Invalid generator configuration; ``field`` names the offending setting."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ProtocolConfig:
    baseline_nb_s: float = 60.0
    n_breath_holds: int = 5
    bh_duration_range_s: tuple[float, float] = (20.0, 60.0)
    inter_bh_recovery_s: float = 90.0
    final_nb_s: float = 60.0
    sample_rate_hz: float = 100.0
    heart_rate_hz: float = 1.2
    heart_rate_variability: float = 0.03  # fractional SD of beat periods
    sbp_baseline_mmhg: float = 126.8
    dbp_baseline_mmhg: float = 74.8
    bh_bp_rise_mmhg: float = 25.0
    bh_relax_tau_s: float = 12.0
    noise_sd_mmhg: float = 2.0
    noise_correlation: float = 0.9  # between a beat's SBP noise and the following DBP noise
    coupling_orders: ArxOrders = field(default_factory=lambda: ArxOrders(1, 2, 3))
    coupling_a: tuple[float, ...] = (-0.95,)
    coupling_b: tuple[float, ...] = (3.0, 3.34)
    ppg_noise_sd: float = 0.0125  # relative beat-to-beat PPG amplitude noise
    ppg_trough_fraction: float = 0.45
    dbp_response_ratio: float = 0.6
    excitation_sd: float = 0.012
    excitation_tau_s: float = 3.0
    interval_gain_sd: float = 0.01
    rng_seed: int = 0

    def validate(self) -> None:
        for name in (
            "baseline_nb_s",
            "inter_bh_recovery_s",
            "final_nb_s",
            "sample_rate_hz",
            "heart_rate_hz",
            "sbp_baseline_mmhg",
            "dbp_baseline_mmhg",
            "bh_relax_tau_s",
            "ppg_trough_fraction",
            "excitation_tau_s",
        ):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(name, f"must be positive, got {value}")
        for name in ("noise_sd_mmhg", "ppg_noise_sd", "excitation_sd", "interval_gain_sd", "heart_rate_variability", "bh_bp_rise_mmhg"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(name, f"must be non-negative, got {value}")
        if int(self.n_breath_holds) != self.n_breath_holds or self.n_breath_holds < 1:
            raise ConfigError("n_breath_holds", f"must be an integer >= 1, got {self.n_breath_holds}")
        lo, hi = self.bh_duration_range_s
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo <= hi):
            raise ConfigError("bh_duration_range_s", f"need 0 < min <= max, got {self.bh_duration_range_s}")
        if self.dbp_baseline_mmhg >= self.sbp_baseline_mmhg:
            raise ConfigError("dbp_baseline_mmhg", "must be below sbp_baseline_mmhg")
        if self.heart_rate_hz * 4 > self.sample_rate_hz:
            raise ConfigError("heart_rate_hz", "too fast for the sample rate")
        if not 0 <= self.noise_correlation <= 1:
            raise ConfigError("noise_correlation", f"must lie in [0, 1], got {self.noise_correlation}")
        if self.heart_rate_variability >= 0.2:
            raise ConfigError("heart_rate_variability", "must be below 0.2")
        orders = self.coupling_orders
        if len(self.coupling_a) != orders.n_a:
            raise ConfigError("coupling_a", f"expected {orders.n_a} coefficients")
        if len(self.coupling_b) != orders.n_b:
            raise ConfigError("coupling_b", f"expected {orders.n_b} coefficients")
        if spectral_radius(self.coupling_a) >= 1.0:
            raise ConfigError("coupling_a", "coupling is unstable (companion spectral radius >= 1)")
        if coupling_gain(self.coupling_a, self.coupling_b) <= 0:
            raise ConfigError("coupling_b", "steady-state gain must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coupling_orders"] = [self.coupling_orders.n_a, self.coupling_orders.n_b, self.coupling_orders.n_k]
        d["bh_duration_range_s"] = list(self.bh_duration_range_s)
        d["coupling_a"] = list(self.coupling_a)
        d["coupling_b"] = list(self.coupling_b)
        return d


def subject_seed(base_seed: int, index: int) -> int:
    """Seed of the ``index``-th (0-based) subject of a cohort generated from ``base_seed``."""
    return int(base_seed) * 1000 + int(index)


def cohort_subject_id(index: int) -> str:
    return f"S{index + 1:02d}"


def spectral_radius(a) -> float:
    """Largest |eigenvalue| of the companion matrix of ``1 + a1 z^-1 + ...``."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    companion = np.zeros((a.size, a.size))
    companion[0, :] = -a
    companion[1:, :-1] = np.eye(a.size - 1)
    return float(np.max(np.abs(np.linalg.eigvals(companion))))


def coupling_gain(a, b) -> float:
    return float(np.sum(b) / (1.0 + np.sum(a)))


@dataclass(frozen=True)
class GroundTruth:
    """Everything the generator knows about a session.

    Tracks are sampled on the session grid. ``interval_models`` maps each
    annotation label to the exact (SBP, DBP) ARX models in force during it.
    """

    sbp_times_s: np.ndarray
    sbp: np.ndarray
    dbp_times_s: np.ndarray
    dbp: np.ndarray
    map: np.ndarray
    ppg_peak_times_s: np.ndarray
    ppg_peak: np.ndarray
    ppg_trough_times_s: np.ndarray
    ppg_trough: np.ndarray
    sbp_track: np.ndarray
    dbp_track: np.ndarray
    ppg_peak_track: np.ndarray
    ppg_trough_track: np.ndarray
    interval_models: dict
    annotations: tuple[IntervalAnnotation, ...]
    bh_durations_s: tuple[float, ...]

    @property
    def beat_times_s(self) -> np.ndarray:
        return self.sbp_times_s


def protocol_annotations(config: ProtocolConfig, bh_durations) -> tuple[IntervalAnnotation, ...]:
    anns = []
    t = 0.0
    anns.append(IntervalAnnotation("NB1", IntervalKind.NB, t, t + config.baseline_nb_s))
    t += config.baseline_nb_s
    n = len(bh_durations)
    for i, dur in enumerate(bh_durations, start=1):
        anns.append(IntervalAnnotation(f"BH{i}", IntervalKind.BH, t, t + dur))
        t += dur
        rest = config.inter_bh_recovery_s if i < n else config.final_nb_s
        anns.append(IntervalAnnotation(f"NB{i + 1}", IntervalKind.NB, t, t + rest))
        t += rest
    return tuple(anns)


def _smooth_noise(rng: np.random.Generator, n: int, sd: float, tau_samples: float) -> np.ndarray:
    """Gaussian noise through two cascaded one-pole lowpasses, scaled to unit SD then ``sd``."""
    if sd == 0:
        return np.zeros(n)
    phi = math.exp(-1.0 / tau_samples)
    w = rng.standard_normal(n + int(10 * tau_samples))
    x = lfilter([1 - phi], [1, -phi], w)
    x = lfilter([1 - phi], [1, -phi], x)
    x = x[-n:]
    return sd * (x - x.mean()) / x.std()


def _bh_envelope(t: np.ndarray, anns, config: ProtocolConfig) -> np.ndarray:
    env = np.zeros_like(t)
    amp_scale = config.bh_bp_rise_mmhg / config.sbp_baseline_mmhg
    max_dur = config.bh_duration_range_s[1]
    for ann in anns:
        if ann.kind != IntervalKind.BH:
            continue
        dur = ann.end_s - ann.start_s
        amp = amp_scale * (0.6 + 0.4 * dur / max_dur)
        tau = dur / 3.0
        during = (t >= ann.start_s) & (t < ann.end_s)
        env[during] += amp * (1 - np.exp(-(t[during] - ann.start_s) / tau)) / (1 - math.exp(-3.0))
        after = t >= ann.end_s
        env[after] += amp * np.exp(-(t[after] - ann.end_s) / config.bh_relax_tau_s)
    return env


def _coupled_output(u: np.ndarray, gain: np.ndarray, orders: ArxOrders, a, b) -> np.ndarray:
    """ARX recursion with the input term scaled by a per-sample gain, started in steady state."""
    num = np.zeros(orders.n_k + orders.n_b)
    num[orders.n_k:] = b
    den = np.concatenate([[1.0], a])
    # hold the input at u[0] before the record starts
    padded = np.concatenate([np.full(num.size - 1, u[0]), u])
    forced = lfilter(num, [1.0], padded)[num.size - 1:]
    drive = gain * forced
    zi = lfilter_zi([1.0], den) * drive[0]
    out, _ = lfilter([1.0], den, drive, zi=zi)
    return out


def _raised_cosine_wave(n: int, onsets: np.ndarray, peaks: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> np.ndarray:
    """Waveform rising from ``lows[k]`` at ``onsets[k]`` to ``highs[k]`` at ``peaks[k]``,
    then falling to ``lows[k+1]`` at ``onsets[k+1]``. ``onsets`` has one more entry than ``peaks``."""
    x = np.empty(n)
    x[:onsets[0]] = lows[0]
    for k in range(peaks.size):
        o, p, o_next = onsets[k], peaks[k], onsets[k + 1]
        rise = np.arange(o, p) - o
        x[o:p] = lows[k] + (highs[k] - lows[k]) * (1 - np.cos(np.pi * rise / (p - o))) / 2
        fall = np.arange(p, o_next) - p
        x[p:o_next] = lows[k + 1] + (highs[k] - lows[k + 1]) * (1 + np.cos(np.pi * fall / (o_next - p))) / 2
    x[onsets[-1]:] = lows[-1]
    return x


def generate_session(config: ProtocolConfig, subject_id: str = "S01") -> tuple[RecordingSession, GroundTruth]:
    """Render one synthetic recording and its ground truth.

    Raises
    ------
    ConfigError
        If the configuration is inconsistent or the coupling is unstable.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    fs = config.sample_rate_hz
    lo, hi = config.bh_duration_range_s
    bh_durations = tuple(float(d) for d in rng.uniform(lo, hi, config.n_breath_holds))
    anns = protocol_annotations(config, bh_durations)
    total_s = anns[-1].end_s
    n = int(math.ceil(total_s * fs - 1e-9))  # the signal must cover the last annotation
    t = np.arange(n) / fs

    env = _bh_envelope(t, anns, config) + _smooth_noise(rng, n, config.excitation_sd, config.excitation_tau_s * fs)
    a = np.asarray(config.coupling_a, dtype=float)
    b = np.asarray(config.coupling_b, dtype=float)
    orders = config.coupling_orders
    u0 = config.sbp_baseline_mmhg / coupling_gain(a, b)
    ppg_peak_track = u0 * (1 + env)
    ppg_trough_track = config.ppg_trough_fraction * u0 * (1 + config.dbp_response_ratio * env)
    b_dbp = b * config.dbp_baseline_mmhg / (coupling_gain(a, b) * config.ppg_trough_fraction * u0)

    gains = {ann.label: float(1 + config.interval_gain_sd * rng.standard_normal()) for ann in anns}
    gain = np.ones(n)
    for ann in anns:
        gain[ann.contains(t)] = gains[ann.label]
    sbp_track = _coupled_output(ppg_peak_track, gain, orders, a, b)
    dbp_track = _coupled_output(ppg_trough_track, gain, orders, a, b_dbp)

    # beat schedule on whole samples
    period = fs / config.heart_rate_hz
    onsets = [int(round(0.3 * period))]
    while True:
        step = int(round(period * (1 + config.heart_rate_variability * rng.standard_normal())))
        nxt = onsets[-1] + max(step, int(0.6 * period))
        if nxt >= n - 1:
            break
        onsets.append(nxt)
    onsets = np.asarray(onsets, dtype=np.int64)
    gaps = np.diff(onsets)
    bp_peaks = onsets[:-1] + np.rint(0.3 * gaps).astype(np.int64)
    ppg_delay = max(1, int(round(0.05 * fs)))
    ppg_onsets = onsets + ppg_delay
    keep = ppg_onsets < n - 1
    ppg_onsets = ppg_onsets[keep]
    ppg_gaps = np.diff(ppg_onsets)
    ppg_peaks = ppg_onsets[:-1] + np.rint(0.25 * ppg_gaps).astype(np.int64)

    # beat k's systolic noise shares a common part with the diastole that ends beat k
    sd, rho = config.noise_sd_mmhg, config.noise_correlation
    common = rng.standard_normal(onsets.size)
    sys_noise = math.sqrt(rho) * common[:-1] + math.sqrt(1 - rho) * rng.standard_normal(bp_peaks.size)
    dia_noise = math.sqrt(rho) * np.roll(common, 1) + math.sqrt(1 - rho) * rng.standard_normal(onsets.size)
    sys_vals = sbp_track[bp_peaks] + sd * sys_noise
    dia_vals = dbp_track[onsets] + sd * dia_noise
    bp_wave = _raised_cosine_wave(n, onsets, bp_peaks, dia_vals, sys_vals)
    ppg_highs = ppg_peak_track[ppg_peaks] * (1 + config.ppg_noise_sd * rng.standard_normal(ppg_peaks.size))
    ppg_lows = ppg_trough_track[ppg_onsets] * (1 + config.ppg_noise_sd * rng.standard_normal(ppg_onsets.size))
    ppg_wave = _raised_cosine_wave(n, ppg_onsets, ppg_peaks, ppg_lows, ppg_highs)

    bp = UniformSignal(fs, bp_wave, SignalLabel.BP, 0.0)
    ppg = UniformSignal(fs, ppg_wave, SignalLabel.PPG, 0.0)
    session = RecordingSession(subject_id, bp, ppg, anns)

    interval_models = {}
    for ann in anns:
        g = gains[ann.label]
        interval_models[ann.label] = (
            ArxModel(orders, a, g * b, 0.0, 0),
            ArxModel(orders, a, g * b_dbp, 0.0, 0),
        )
    # troughs between consecutive peaks are the interior onsets
    dbp_idx = onsets[1:-1]
    truth = GroundTruth(
        sbp_times_s=bp_peaks / fs,
        sbp=sys_vals,
        dbp_times_s=dbp_idx / fs,
        dbp=dia_vals[1:-1],
        map=mean_arterial_pressure(sys_vals[:-1], dia_vals[1:-1]),
        ppg_peak_times_s=ppg_peaks / fs,
        ppg_peak=ppg_highs,
        ppg_trough_times_s=ppg_onsets[1:-1] / fs,
        ppg_trough=ppg_lows[1:-1],
        sbp_track=sbp_track,
        dbp_track=dbp_track,
        ppg_peak_track=ppg_peak_track,
        ppg_trough_track=ppg_trough_track,
        interval_models=interval_models,
        annotations=anns,
        bh_durations_s=bh_durations,
    )
    return session, truth


def write_ground_truth(truth: GroundTruth, directory, subject_id: str) -> tuple[Path, Path]:
    """Beat-level truth as ``<id>_truth_beats.csv`` and couplings as ``<id>_truth_models.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    beats_path = directory / f"{subject_id}_truth_beats.csv"
    rows = []
    for name, times, values in (
        ("SBP", truth.sbp_times_s, truth.sbp),
        ("DBP", truth.dbp_times_s, truth.dbp),
        ("MAP", truth.dbp_times_s, truth.map),
        ("PPG_PEAK", truth.ppg_peak_times_s, truth.ppg_peak),
        ("PPG_TROUGH", truth.ppg_trough_times_s, truth.ppg_trough),
    ):
        rows.extend(f"{name},{t!r},{v!r}\n" for t, v in zip(times.tolist(), values.tolist()))
    with open(beats_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("feature,t_s,value\n")
        fh.writelines(rows)
    models_path = directory / f"{subject_id}_truth_models.json"
    payload = {
        label: {
            "n_a": sbp_m.orders.n_a,
            "n_b": sbp_m.orders.n_b,
            "n_k": sbp_m.orders.n_k,
            "a": sbp_m.a.tolist(),
            "b_sbp": sbp_m.b.tolist(),
            "b_dbp": dbp_m.b.tolist(),
        }
        for label, (sbp_m, dbp_m) in truth.interval_models.items()
    }
    models_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return beats_path, models_path
