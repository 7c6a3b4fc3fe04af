"""On-disk artifacts of a run: grid logs, rMSE tables, JSON report, plot data, residuals.

Everything written here is a pure function of its inputs. Floats are
written with ``repr`` (CSV) or Python's shortest round-trip form (JSON), the
residual archive uses a fixed zip timestamp, and rows follow a sorted order,
so rerunning on the same data reproduces every file byte for byte.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arx import ModelSelectionResult
from .core import Feature, IntervalKind
from .evaluation import MODEL_ERROR, PREDICTION_ERROR, ErrorReport, ErrorSeries

__all__ = [
    "TABLE_FILES",
    "COUNTS_FILE",
    "write_grid_csv",
    "write_table_csv",
    "write_counts_csv",
    "write_plot_data",
    "report_to_dict",
    "write_report",
    "save_residuals",
    "load_residuals",
]

TABLE_FILES = {
    (MODEL_ERROR, IntervalKind.NB): "table1_nb_model.csv",
    (MODEL_ERROR, IntervalKind.BH): "table2_bh_model.csv",
    (PREDICTION_ERROR, IntervalKind.NB): "table3_nb_prediction.csv",
    (PREDICTION_ERROR, IntervalKind.BH): "table4_bh_prediction.csv",
}
COUNTS_FILE = "table5_counts.csv"
REPORT_FILE = "report.json"
PLOT_FILE = "plot_data.csv"
RESIDUALS_FILE = "residuals.npz"

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_KEY_SEP = "__"


def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return None if not math.isfinite(x) else x


def write_grid_csv(result: ModelSelectionResult, path) -> Path:
    """One row per grid cell; absent cells keep their row with the failure reason."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["n_a,n_b,n_k,status,n_rows,mse,aic,best_by_mse,best_by_aic,reason"]
    for orders, cell in result.grid.items():
        if cell.model is None:
            reason = (cell.failure or "").replace(",", ";").replace("\n", " ")
            lines.append(f"{orders.n_a},{orders.n_b},{orders.n_k},absent,,,,0,0,{reason}")
            continue
        lines.append(
            f"{orders.n_a},{orders.n_b},{orders.n_k},ok,{cell.model.n_samples_used},"
            f"{_num(cell.mse)},{_num(cell.aic)},"
            f"{int(orders == result.best_by_mse.orders)},{int(orders == result.best_by_aic.orders)},"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_table_csv(report: ErrorReport, error_type: str, kind, path) -> Path:
    """Features as rows and intervals as columns; blank entries mark absent cells."""
    features, labels, values = report.table(error_type, kind, "rmse")
    lines = [",".join(["feature", *labels])]
    for feat, row in zip(features, values):
        lines.append(",".join([feat, *(_num(v) for v in row)]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_counts_csv(report: ErrorReport, path) -> Path:
    lines = ["kind,error_type,feature,n_subjects,n_pairs,n_unequal,anova_f,anova_p"]
    for (kind, error_type, feature), res in report.consistency.items():
        lines.append(
            f"{kind.value},{error_type},{feature.value},{res.n_groups},{res.n_pairs},"
            f"{res.n_unequal},{_num(res.anova_f)},{_num(res.anova_p)}"
        )
    lines.append(f"total,,,,{report.total_pairs},{report.total_unequal},,")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_plot_data(report: ErrorReport, path) -> Path:
    """Long format ``feature,interval,statistic,value`` with ``<error type>_<stat>`` statistics."""
    lines = ["feature,interval,statistic,value"]
    for c in report.cells:
        for stat in ("mean", "std", "rmse"):
            lines.append(f"{c.feature.value},{c.label},{c.error_type}_{stat},{_num(getattr(c, stat))}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def report_to_dict(report: ErrorReport, extra: dict | None = None) -> dict:
    cells = [
        {
            "error_type": c.error_type,
            "kind": c.kind.value,
            "feature": c.feature.value,
            "interval": c.label,
            "n": c.n,
            "n_series": c.n_series,
            "rmse": _json_num(c.rmse),
            "mean": _json_num(c.mean),
            "std": _json_num(c.std),
        }
        for c in report.cells
    ]
    consistency = [
        {
            "kind": kind.value,
            "error_type": error_type,
            "feature": feature.value,
            "n_subjects": res.n_groups,
            "anova_f": _json_num(res.anova_f),
            "anova_p": _json_num(res.anova_p),
            "n_pairs": res.n_pairs,
            "n_unequal": res.n_unequal,
            "unequal_pairs": [list(p) for p in res.unequal_pairs()],
        }
        for (kind, error_type, feature), res in report.consistency.items()
    ]
    total = report.total_pairs
    out = {
        "cells": cells,
        "consistency": consistency,
        "total_pairs": total,
        "total_unequal": report.total_unequal,
        "unequal_fraction": (report.total_unequal / total) if total else None,
        "notes": list(report.notes),
    }
    if extra:
        out.update(extra)
    return out


def _residual_key(s: ErrorSeries) -> str:
    kind = s.kind.value if s.kind is not None else ""
    parts = (s.error_type, s.subject_id, kind, s.feature.value, s.source_model_label, s.interval_label)
    for p in parts:
        if _KEY_SEP in p:
            raise ValueError(f"identifier {p!r} may not contain {_KEY_SEP!r}")
    return _KEY_SEP.join(parts)


def save_residuals(errors: Iterable[ErrorSeries], path) -> Path:
    """Write every residual series to an ``.npz`` archive readable by ``numpy.load``.

    Member names encode ``error_type, subject, kind, feature, source, target``
    joined by a double underscore.
    """
    path = Path(path)
    members = {}
    for s in errors:
        key = _residual_key(s)
        if key in members:
            raise ValueError(f"duplicate residual series {key}")
        members[key] = s.residuals
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(members):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(members[key], dtype="<f8"), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def load_residuals(path) -> list[ErrorSeries]:
    out = []
    with np.load(path, allow_pickle=False) as data:
        for key in sorted(data.files):
            error_type, subject, kind, feature, source, target = key.split(_KEY_SEP)
            out.append(
                ErrorSeries(
                    Feature(feature),
                    target,
                    source,
                    data[key],
                    subject_id=subject,
                    kind=IntervalKind(kind) if kind else None,
                    error_type=error_type,
                )
            )
    return out


def write_report(
    errors: Sequence[ErrorSeries],
    out_dir,
    alpha: float = 0.05,
    group_by: str | None = None,
    extra: dict | None = None,
) -> tuple[ErrorReport, list[Path]]:
    """Build the report from ``errors`` and write every report file into ``out_dir``.

    The counts table is left out (with a note) when fewer than two subjects
    contribute, since the between-subject ANOVA is undefined then.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ErrorReport.from_errors(errors, alpha, group_by)
    written = []
    for (error_type, kind), name in TABLE_FILES.items():
        written.append(write_table_csv(report, error_type, kind, out_dir / name))
    counts_path = out_dir / COUNTS_FILE
    if report.consistency:
        written.append(write_counts_csv(report, counts_path))
    else:
        counts_path.unlink(missing_ok=True)
        if not any("consistency" in n for n in report.notes):
            report.notes.append("subject consistency table suppressed: no cell had 2 or more subjects")
    written.append(write_plot_data(report, out_dir / PLOT_FILE))
    written.append(save_residuals(errors, out_dir / RESIDUALS_FILE))
    payload = report_to_dict(report, extra)
    report_path = out_dir / REPORT_FILE
    report_path.write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    written.append(report_path)
    return report, written
