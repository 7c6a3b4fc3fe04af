"""Model/prediction errors, pooled rMSE tables and between-subject consistency.

Residuals are ``measured - estimated`` and only cover samples from a model's
start index ``m0`` onward; warm-up samples never enter a statistic.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .arx import ArxModel, one_step_predict, simulate_free_run
from .beats import mean_arterial_pressure
from .core import Feature, IntervalKind

__all__ = [
    "ERROR_MODES",
    "MODEL_ERROR",
    "PREDICTION_ERROR",
    "DivergedSimulationError",
    "ErrorSeries",
    "CellStats",
    "ConsistencyResult",
    "ErrorReport",
    "rmse",
    "estimate_feature",
    "model_error_series",
    "cross_prediction_matrix",
    "pooled_stats",
    "summarize",
    "one_way_anova",
    "tukey_kramer",
    "subject_consistency",
    "consistency_table",
]

ERROR_MODES = ("free-run", "one-step")
MODEL_ERROR = "model"
PREDICTION_ERROR = "prediction"
BP_FEATURES = (Feature.SBP, Feature.DBP, Feature.MAP)


class DivergedSimulationError(ArithmeticError):
    """A free-run simulation blew past the divergence limit."""


@dataclass(frozen=True)
class ErrorSeries:
    """Residuals of one model applied to one interval.

    ``interval_label`` is where the residuals were measured and
    ``source_model_label`` the interval the model was identified on; they
    are equal for model errors.
    """

    feature: Feature
    interval_label: str
    source_model_label: str
    residuals: np.ndarray
    subject_id: str = ""
    kind: IntervalKind | None = None
    error_type: str = MODEL_ERROR

    def __post_init__(self):
        r = np.array(self.residuals, dtype=float)
        if r.ndim != 1 or r.size == 0:
            raise ValueError("residuals must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(r)):
            raise ValueError("residuals must be finite")
        r.flags.writeable = False
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "feature", Feature(self.feature))
        if self.kind is not None:
            object.__setattr__(self, "kind", IntervalKind(self.kind))

    def sort_key(self) -> tuple:
        return (self.subject_id, self.source_model_label, self.interval_label)


def rmse(residuals) -> float:
    """Root mean square of the residuals."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("rmse of an empty residual set")
    scale = float(np.max(np.abs(r)))
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    # scaling keeps tiny or huge residuals from under/overflowing when squared
    r = r / scale
    return scale * math.sqrt(float(np.dot(r, r)) / r.size)


def _estimate_single(model: ArxModel, y, u, mode: str) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if mode == "one-step":
        return one_step_predict(model, y, u)
    if mode == "free-run":
        run = simulate_free_run(model, y[:model.start_index], u)
        if run.diverged:
            raise DivergedSimulationError(
                f"free-run simulation of {model.orders} diverged at sample {model.start_index + run.diverged_at}"
            )
        return run.values
    raise ValueError(f"unknown error mode {mode!r}; expected one of {ERROR_MODES}")


def estimate_feature(feature, model, track, mode: str = "one-step") -> tuple[np.ndarray, np.ndarray]:
    """Measured and estimated values of a BP feature over the model's valid range.

    For SBP/DBP ``model`` is an :class:`ArxModel` and ``track`` a ``(y, u)``
    pair. For MAP both are ``(sbp, dbp)`` pairs and the estimate combines the
    SBP and DBP estimates as ``(2 DBP + SBP) / 3`` on the samples both cover.
    """
    feature = Feature(feature)
    if feature == Feature.MAP:
        (sbp_model, dbp_model), ((ys, us), (yd, ud)) = model, track
        if len(ys) != len(yd):
            raise ValueError("SBP and DBP tracks must share the interval grid")
        start = max(sbp_model.start_index, dbp_model.start_index)
        sbp_hat = _estimate_single(sbp_model, ys, us, mode)[start - sbp_model.start_index:]
        dbp_hat = _estimate_single(dbp_model, yd, ud, mode)[start - dbp_model.start_index:]
        measured = mean_arterial_pressure(np.asarray(ys)[start:], np.asarray(yd)[start:])
        return measured, mean_arterial_pressure(sbp_hat, dbp_hat)
    if feature not in (Feature.SBP, Feature.DBP):
        raise ValueError(f"{feature.value} is not a modelled BP feature")
    y, u = track
    y = np.asarray(y, dtype=float)
    return y[model.start_index:], _estimate_single(model, y, u, mode)


def model_error_series(
    model,
    y,
    u=None,
    feature=Feature.SBP,
    interval="",
    mode: str = "one-step",
    subject_id: str = "",
    kind=None,
) -> ErrorSeries:
    """Residuals of a model on the interval it was fitted to.

    ``y``/``u`` are the interval's output and input tracks; for MAP pass the
    ``(sbp_model, dbp_model)`` pair as ``model`` and the pair of tracks as ``y``.
    """
    track = y if u is None else (y, u)
    measured, estimated = estimate_feature(feature, model, track, mode)
    return ErrorSeries(feature, interval, interval, measured - estimated, subject_id, kind, MODEL_ERROR)


def _label_kind(label: str) -> IntervalKind | None:
    for kind in IntervalKind:
        if label.startswith(kind.value):
            return kind
    return None


def cross_prediction_matrix(
    models: Mapping[str, object],
    tracks: Mapping[str, object],
    kind,
    feature,
    mode: str = "one-step",
    subject_id: str = "",
    kinds: Mapping[str, IntervalKind] | None = None,
) -> list[ErrorSeries]:
    """Apply each congruent interval's model to every other congruent interval.

    Intervals are congruent when they share ``kind`` (taken from ``kinds`` or
    from the label prefix). A model is never applied to its own interval.
    Pairs whose target is too short for the source model, or whose free run
    diverges, are skipped with a warning.
    """
    kind = IntervalKind(kind)
    feature = Feature(feature)
    kind_of = (lambda lb: kinds.get(lb)) if kinds is not None else _label_kind
    labels = sorted(lb for lb in models if kind_of(lb) == kind and lb in tracks)
    if len(labels) < 2:
        raise ValueError(f"need at least 2 {kind.value} intervals with models, got {len(labels)}")
    out = []
    for source in labels:
        for target in labels:
            if source == target:
                continue
            try:
                measured, estimated = estimate_feature(feature, models[source], tracks[target], mode)
            except (ValueError, DivergedSimulationError) as exc:
                warnings.warn(f"{subject_id} {feature.value} {source}->{target} skipped: {exc}", stacklevel=2)
                continue
            if measured.size == 0:
                warnings.warn(f"{subject_id} {feature.value} {source}->{target} skipped: no samples", stacklevel=2)
                continue
            out.append(ErrorSeries(feature, target, source, measured - estimated, subject_id, kind, PREDICTION_ERROR))
    return out


@dataclass(frozen=True)
class CellStats:
    error_type: str
    kind: IntervalKind
    feature: Feature
    label: str
    n: int
    rmse: float
    mean: float
    std: float
    n_series: int


def pooled_stats(series: Sequence[ErrorSeries]) -> tuple[int, float, float, float]:
    """(n, rmse, mean, std) of all residual samples pooled in a fixed order."""
    ordered = sorted(series, key=ErrorSeries.sort_key)
    pooled = np.concatenate([s.residuals for s in ordered])
    n = pooled.size
    mean = float(np.sum(pooled)) / n
    std = float(np.std(pooled, ddof=1)) if n > 1 else 0.0
    return n, rmse(pooled), mean, std


def summarize(errors: Iterable[ErrorSeries], group_by: str | None = None) -> list[CellStats]:
    """Pool residuals from all subjects per (error type, kind, feature, interval).

    Model errors are grouped by the interval they were measured on.
    Prediction errors are grouped by the source model's interval unless
    ``group_by="target"``.
    """
    groups: dict[tuple, list[ErrorSeries]] = {}
    for s in errors:
        if group_by == "target" or s.error_type == MODEL_ERROR:
            label = s.interval_label
        elif group_by in (None, "source"):
            label = s.source_model_label
        else:
            raise ValueError(f"group_by must be 'source' or 'target', got {group_by!r}")
        kind = s.kind if s.kind is not None else _label_kind(label)
        groups.setdefault((s.error_type, kind, s.feature, label), []).append(s)
    cells = []
    for key in sorted(groups, key=lambda k: (k[0], k[1].value, BP_FEATURES.index(k[2]) if k[2] in BP_FEATURES else 9, _label_order(k[3]))):
        error_type, kind, feature, label = key
        n, r, m, sd = pooled_stats(groups[key])
        cells.append(CellStats(error_type, kind, feature, label, n, r, m, sd, len(groups[key])))
    return cells


def _label_order(label: str) -> tuple:
    digits = "".join(ch for ch in label if ch.isdigit())
    return (label.rstrip("0123456789"), int(digits) if digits else -1, label)


def one_way_anova(groups: Sequence[np.ndarray]) -> tuple[float, float, float, int]:
    """Return ``(F, p, within-group mean square, within-group df)``."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    k = len(groups)
    n_total = sum(g.size for g in groups)
    grand = sum(float(np.sum(g)) for g in groups) / n_total
    ss_between = sum(g.size * (float(np.mean(g)) - grand) ** 2 for g in groups)
    ss_within = sum(float(np.sum((g - np.mean(g)) ** 2)) for g in groups)
    df_between, df_within = k - 1, n_total - k
    ms_within = ss_within / df_within
    if ms_within == 0:
        f_stat = math.inf if ss_between > 0 else math.nan
        p = 0.0 if ss_between > 0 else math.nan
    else:
        f_stat = (ss_between / df_between) / ms_within
        p = float(stats.f.sf(f_stat, df_between, df_within))
    return f_stat, p, ms_within, df_within


@functools.lru_cache(maxsize=256)
def _studentized_range_critical(alpha: float, k: int, df: float) -> float:
    return float(stats.studentized_range.ppf(1.0 - alpha, k, df))


@dataclass(frozen=True)
class PairComparison:
    first: str
    second: str
    mean_difference: float  # mean(first) - mean(second)
    q_statistic: float  # |difference| / standard error
    unequal: bool
    n_groups: int
    df: float

    @property
    def p_value(self) -> float:
        """Tukey-Kramer adjusted p-value (computed on demand; it is comparatively slow)."""
        if math.isinf(self.q_statistic):
            return 0.0
        if math.isnan(self.q_statistic):
            return 1.0
        return float(stats.studentized_range.sf(self.q_statistic, self.n_groups, self.df))


def tukey_kramer(groups: Mapping[str, np.ndarray], alpha: float = 0.05) -> list[PairComparison]:
    """All-pairs Tukey-Kramer comparison of group means.

    Pairs are listed once, in sorted key order. The studentized range statistic
    uses the pooled within-group variance with ``N - k`` degrees of freedom; a
    pair is unequal when it exceeds the ``1 - alpha`` quantile of the
    studentized range distribution, which is the same as ``p < alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    names = sorted(groups)
    arrays = [np.asarray(groups[nm], dtype=float) for nm in names]
    k = len(arrays)
    _, _, ms_within, df = one_way_anova(arrays)
    critical = _studentized_range_critical(float(alpha), k, float(df))
    means = [float(np.mean(a)) for a in arrays]
    out = []
    for i, j in combinations(range(k), 2):
        diff = means[i] - means[j]
        se = math.sqrt(ms_within / 2.0 * (1.0 / arrays[i].size + 1.0 / arrays[j].size))
        if se == 0:
            q = math.inf if diff != 0 else math.nan
        else:
            q = abs(diff) / se
        out.append(PairComparison(names[i], names[j], diff, q, bool(q > critical), k, float(df)))
    return out


@dataclass(frozen=True)
class ConsistencyResult:
    n_groups: int
    anova_f: float
    anova_p: float
    pairs: tuple[PairComparison, ...]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_unequal(self) -> int:
        return sum(p.unequal for p in self.pairs)

    def unequal_pairs(self) -> list[tuple[str, str]]:
        return [(p.first, p.second) for p in self.pairs if p.unequal]


def subject_consistency(groups: Mapping[str, np.ndarray], alpha: float = 0.05) -> ConsistencyResult:
    """One-way ANOVA across subjects followed by Tukey-Kramer on every pair.

    Every pair is tested regardless of the omnibus ANOVA outcome.

    Raises
    ------
    ValueError
        Fewer than 2 subjects, or a subject with fewer than 2 samples.
    """
    if len(groups) < 2:
        raise ValueError("subject consistency needs at least 2 subjects")
    for name, g in groups.items():
        if np.asarray(g).size < 2:
            raise ValueError(f"subject {name} has fewer than 2 residual samples")
    names = sorted(groups)
    f_stat, p, _, _ = one_way_anova([groups[nm] for nm in names])
    return ConsistencyResult(len(names), f_stat, p, tuple(tukey_kramer(groups, alpha)))


def consistency_table(errors: Iterable[ErrorSeries], alpha: float = 0.05) -> dict:
    """Subject-consistency results keyed by ``(kind, error_type, feature)``.

    Each subject contributes all its residual samples for the cell, pooled
    across intervals in a fixed order.
    """
    per_cell: dict[tuple, dict[str, list[ErrorSeries]]] = {}
    for s in errors:
        kind = s.kind if s.kind is not None else _label_kind(s.interval_label)
        per_cell.setdefault((kind, s.error_type, s.feature), {}).setdefault(s.subject_id, []).append(s)
    out = {}
    for key in sorted(per_cell, key=lambda k: (k[0].value, k[1], BP_FEATURES.index(k[2]))):
        by_subject = per_cell[key]
        if len(by_subject) < 2:
            continue
        groups = {
            subj: np.concatenate([s.residuals for s in sorted(series, key=ErrorSeries.sort_key)])
            for subj, series in by_subject.items()
        }
        out[key] = subject_consistency(groups, alpha)
    return out


@dataclass
class ErrorReport:
    cells: list[CellStats]
    consistency: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @classmethod
    def from_errors(cls, errors: Sequence[ErrorSeries], alpha: float = 0.05, group_by: str | None = None) -> ErrorReport:
        errors = list(errors)
        notes = []
        subjects = {s.subject_id for s in errors}
        consistency = {}
        if len(subjects) >= 2:
            consistency = consistency_table(errors, alpha)
        else:
            notes.append("subject consistency skipped: ANOVA needs at least 2 subjects")
        return cls(summarize(errors, group_by), consistency, notes)

    def cell(self, error_type: str, kind, feature, label: str) -> CellStats | None:
        kind, feature = IntervalKind(kind), Feature(feature)
        for c in self.cells:
            if (c.error_type, c.kind, c.feature, c.label) == (error_type, kind, feature, label):
                return c
        return None

    def labels(self, error_type: str, kind) -> list[str]:
        kind = IntervalKind(kind)
        found = {c.label for c in self.cells if c.error_type == error_type and c.kind == kind}
        return sorted(found, key=_label_order)

    def table(self, error_type: str, kind, statistic: str = "rmse") -> tuple[list[str], list[str], np.ndarray]:
        """(feature names, interval labels, values) with NaN marking absent cells."""
        labels = self.labels(error_type, kind)
        values = np.full((len(BP_FEATURES), len(labels)), np.nan)
        for i, feat in enumerate(BP_FEATURES):
            for j, lb in enumerate(labels):
                c = self.cell(error_type, kind, feat, lb)
                if c is not None:
                    values[i, j] = getattr(c, statistic)
        return [f.value for f in BP_FEATURES], labels, values

    @property
    def total_pairs(self) -> int:
        return sum(r.n_pairs for r in self.consistency.values())

    @property
    def total_unequal(self) -> int:
        return sum(r.n_unequal for r in self.consistency.values())
