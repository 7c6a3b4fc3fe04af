"""Command-line front end: ``synth``, ``fit`` and ``evaluate``.

Settings come from an optional INI file with sections ``[synth]``,
``[detection]``, ``[fit]`` and ``[eval]``; ``--set section.key=value`` and
the dedicated flags override it. Exit codes: 0 success, 1 finished with
warnings, 2 invalid input.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .arx import ArxOrders, OrderBounds, load_model, save_model
from .core import Feature, load_session, save_session, validate_session
from .evaluation import ERROR_MODES
from .pipeline import DetectionConfig, MODELLED_FEATURES, evaluate_subject, fit_subject, prepare_subject
from .report import write_grid_csv, write_report
from .synth import (
    ConfigError,
    ProtocolConfig,
    cohort_subject_id,
    generate_session,
    subject_seed,
    write_ground_truth,
)

log = logging.getLogger("ppgbp")

EXIT_OK, EXIT_WARN, EXIT_INVALID = 0, 1, 2
MANIFEST = "manifest.json"
FIT_SUMMARY = "fit_summary.json"


class InputError(Exception):
    """Invalid user input; the message names the offending field or path."""


# ---------------------------------------------------------------- settings

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _orders(text: str) -> ArxOrders:
    parts = [int(v) for v in str(text).replace(" ", "").split(",")]
    if len(parts) != 3:
        raise ValueError("expected n_a,n_b,n_k")
    return ArxOrders(*parts)


def _synth_parsers() -> dict:
    parsers = {"subjects": int, "seed": int}
    for f in dataclasses.fields(ProtocolConfig):
        if f.name == "rng_seed":
            continue
        if f.name == "coupling_orders":
            parsers[f.name] = _orders
        elif f.name in ("bh_duration_range_s", "coupling_a", "coupling_b"):
            parsers[f.name] = _floats
        elif f.type in ("int", int):
            parsers[f.name] = int
        else:
            parsers[f.name] = float
    return parsers


DETECTION_KEYS = {
    "bp.height_mmhg": ("15", "minimum SBP peak height, mmHg"),
    "bp.prominence_mmhg": ("15", "minimum SBP peak prominence, mmHg"),
    "bp.distance_samples": ("20", "minimum samples between SBP peaks"),
    "ppg.prominence_mode": ("iqr", "'iqr' (fraction of the signal IQR) or 'absolute'"),
    "ppg.prominence_iqr_fraction": ("0.5", "PPG prominence as a fraction of the IQR"),
    "ppg.prominence": ("none", "absolute PPG prominence (mode 'absolute')"),
    "ppg.height": ("none", "minimum PPG peak height; none means the signal median"),
    "ppg.distance_samples": ("20", "minimum samples between PPG peaks"),
}
FIT_KEYS = {
    "max_order": (int, "5", "largest n_a and n_b in the grid (1..5)"),
    "max_delay": (int, "5", "largest n_k in the grid (0..5)"),
    "selection": (str, "mse", "model choice per interval: mse or aic"),
    "workers": (int, "1", "parallel processes (one subject each)"),
}
EVAL_KEYS = {
    "error_mode": (str, "free-run", "free-run (simulate from the input) or one-step"),
    "group_by": (str, "source", "pool prediction errors by source or target interval"),
    "alpha": (float, "0.05", "significance level of the subject comparisons"),
    "workers": (int, "1", "parallel processes (one subject each)"),
}


def _keys_epilog() -> str:
    lines = ["config file keys (INI sections; override with --set section.key=value):", "", "[synth]"]
    defaults = ProtocolConfig().to_dict()
    lines.append("  subjects = 15")
    lines.append("  seed = 1")
    for name in _synth_parsers():
        if name in defaults:
            v = defaults[name]
            v = ",".join(str(x) for x in v) if isinstance(v, list) else v
            lines.append(f"  {name} = {v}")
    lines.append("[detection]")
    lines += [f"  {k} = {d}    ; {h}" for k, (d, h) in DETECTION_KEYS.items()]
    lines.append("[fit]")
    lines += [f"  {k} = {d}    ; {h}" for k, (_, d, h) in FIT_KEYS.items()]
    lines.append("[eval]")
    lines += [f"  {k} = {d}    ; {h}" for k, (_, d, h) in EVAL_KEYS.items()]
    return "\n".join(lines)


def load_settings(path, overrides) -> dict:
    """Merge the INI file and ``section.key=value`` overrides into nested dicts."""
    settings = {"synth": {}, "detection": {}, "fit": {}, "eval": {}}
    if path:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config: file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise InputError(f"config: {exc}") from exc
        for section in parser.sections():
            if section not in settings:
                raise InputError(f"config: unknown section [{section}]")
            settings[section].update(parser[section])
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in settings:
            raise InputError(f"--set {item!r}: expected section.key=value with section in {sorted(settings)}")
        settings[section][name] = value.strip()
    return settings


def _check_known(section: str, given: dict, known) -> None:
    for key in given:
        if key not in known:
            raise InputError(f"[{section}] {key}: unknown key")


def _typed(section: str, given: dict, spec: dict) -> dict:
    _check_known(section, given, spec)
    out = {}
    for key, (conv, default, _) in spec.items():
        raw = given.get(key, default)
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"[{section}] {key}: {exc}") from exc
    return out


def detection_from_settings(given: dict) -> DetectionConfig:
    _check_known("detection", given, DETECTION_KEYS)
    merged = {k: d for k, (d, _) in DETECTION_KEYS.items()}
    merged.update(given)
    for key in ("bp.height_mmhg", "bp.prominence_mmhg", "ppg.prominence_iqr_fraction"):
        try:
            float(merged[key])
        except ValueError as exc:
            raise InputError(f"[detection] {key}: {exc}") from exc
    try:
        return DetectionConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise InputError(f"[detection] {exc}") from exc


def fit_from_settings(given: dict) -> dict:
    fit = _typed("fit", given, FIT_KEYS)
    if fit["selection"] not in ("mse", "aic"):
        raise InputError(f"[fit] selection: expected 'mse' or 'aic', got {fit['selection']!r}")
    if not 1 <= fit["max_order"] <= 5:
        raise InputError(f"[fit] max_order: must lie in 1..5, got {fit['max_order']}")
    if not 0 <= fit["max_delay"] <= 5:
        raise InputError(f"[fit] max_delay: must lie in 0..5, got {fit['max_delay']}")
    if fit["workers"] < 1:
        raise InputError(f"[fit] workers: must be at least 1, got {fit['workers']}")
    return fit


def eval_from_settings(given: dict) -> dict:
    ev = _typed("eval", given, EVAL_KEYS)
    if ev["error_mode"] not in ERROR_MODES:
        raise InputError(f"[eval] error_mode: expected one of {ERROR_MODES}, got {ev['error_mode']!r}")
    if ev["group_by"] not in ("source", "target"):
        raise InputError(f"[eval] group_by: expected 'source' or 'target', got {ev['group_by']!r}")
    if not 0 < ev["alpha"] < 1:
        raise InputError(f"[eval] alpha: must lie in (0, 1), got {ev['alpha']}")
    if ev["workers"] < 1:
        raise InputError(f"[eval] workers: must be at least 1, got {ev['workers']}")
    return ev


def synth_from_settings(given: dict) -> tuple[ProtocolConfig, int, int, bool]:
    """Returns ``(config, n_subjects, base_seed, ppg_noise_given)``."""
    parsers = _synth_parsers()
    _check_known("synth", given, parsers)
    values = {}
    for key, raw in given.items():
        try:
            values[key] = parsers[key](raw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"[synth] {key}: {exc}") from exc
    n_subjects = values.pop("subjects", 15)
    seed = values.pop("seed", 1)
    if n_subjects < 1:
        raise InputError(f"[synth] subjects: must be at least 1, got {n_subjects}")
    ppg_given = "ppg_noise_sd" in values
    if values.get("noise_sd_mmhg") == 0.0 and not ppg_given:
        # a noise-free request silences beat noise on both channels
        values["ppg_noise_sd"] = 0.0
    if "bh_duration_range_s" in values and len(values["bh_duration_range_s"]) != 2:
        raise InputError("[synth] bh_duration_range_s: expected min,max")
    try:
        config = ProtocolConfig(**values)
        config.validate()
    except ConfigError as exc:
        raise InputError(f"[synth] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"[synth] {exc}") from exc
    return config, n_subjects, seed, ppg_given


# ---------------------------------------------------------------- helpers

def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def discover_subjects(session_dir: Path) -> list[str]:
    if not session_dir.is_dir():
        raise InputError(f"sessions: directory not found: {session_dir}")
    manifest = session_dir / MANIFEST
    if manifest.is_file():
        ids = [s["subject_id"] for s in json.loads(manifest.read_text(encoding="utf-8"))["subjects"]]
    else:
        ids = sorted(p.name[: -len("_recording.csv")] for p in session_dir.glob("*_recording.csv"))
    if not ids:
        raise InputError(f"sessions: no *_recording.csv files in {session_dir}")
    return ids


def _load_valid_session(session_dir: Path, sid: str):
    try:
        session = load_session(session_dir, sid)
    except FileNotFoundError as exc:
        raise InputError(f"sessions: missing file for subject {sid}: {exc.filename}") from exc
    except ValueError as exc:
        raise InputError(f"sessions: subject {sid}: {exc}") from exc
    problems = validate_session(session)
    if problems:
        raise InputError(f"sessions: subject {sid}: " + "; ".join(problems))
    return session


def _map_subjects(func, jobs: list, workers: int) -> list:
    """Run ``func`` over ``jobs`` and return results in job order, whatever the worker count."""
    if workers <= 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(func, jobs))


def _model_path(model_dir: Path, sid: str, feature: Feature, label: str) -> Path:
    return model_dir / "models" / sid / f"{feature.value}_{label}.json"


def _grid_path(model_dir: Path, sid: str, feature: Feature, label: str) -> Path:
    return model_dir / "grids" / sid / f"{feature.value}_{label}.csv"


# ---------------------------------------------------------------- synth

def cmd_synth(args, settings) -> int:
    if args.subjects is not None:
        settings["synth"]["subjects"] = str(args.subjects)
    if args.seed is not None:
        settings["synth"]["seed"] = str(args.seed)
    if args.noise_sd is not None:
        settings["synth"]["noise_sd_mmhg"] = repr(args.noise_sd)
    if args.ppg_noise_sd is not None:
        settings["synth"]["ppg_noise_sd"] = repr(args.ppg_noise_sd)
    config, n_subjects, seed, _ = synth_from_settings(settings["synth"])
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        subjects = []
        for i in range(n_subjects):
            sid = cohort_subject_id(i)
            cfg = dataclasses.replace(config, rng_seed=subject_seed(seed, i))
            session, truth = generate_session(cfg, sid)
            rec, ann = save_session(session, out)
            beats, models = write_ground_truth(truth, out, sid)
            subjects.append(
                {
                    "subject_id": sid,
                    "rng_seed": cfg.rng_seed,
                    "duration_s": len(session.bp) / session.bp.sample_rate_hz,
                    "bh_durations_s": list(truth.bh_durations_s),
                    "files": [p.name for p in (rec, ann, beats, models)],
                }
            )
        noise_free = config.noise_sd_mmhg == 0 and config.ppg_noise_sd == 0
        _write_json(
            out / MANIFEST,
            {
                "seed": seed,
                "n_subjects": n_subjects,
                "noise_free": noise_free,
                "config": config.to_dict(),
                "subjects": subjects,
            },
        )
    except OSError as exc:
        raise InputError(f"out: {exc}") from exc
    flag = " (noise-free)" if noise_free else ""
    print(f"synth: wrote {n_subjects} sessions{flag} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _fit_one(job) -> dict:
    session_dir, model_dir, sid, detection, bounds, selection = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        session = _load_valid_session(Path(session_dir), sid)
        subject = prepare_subject(session, detection)
        outcome = fit_subject(subject, bounds, MODELLED_FEATURES)
    model_dir = Path(model_dir)
    written = []
    for (feature, label), result in outcome.results.items():
        model = result.best(selection)
        written.append(str(save_model(model, _model_path(model_dir, sid, feature, label), feature.value, label)))
        write_grid_csv(result, _grid_path(model_dir, sid, feature, label))
    return {
        "subject_id": sid,
        "n_models": len(written),
        "failures": sorted(outcome.failures.values()),
        "warnings": sorted({str(w.message) for w in caught}),
    }


def cmd_fit(args, settings) -> int:
    if args.selection is not None:
        settings["fit"]["selection"] = args.selection
    if args.workers is not None:
        settings["fit"]["workers"] = str(args.workers)
    fit = fit_from_settings(settings["fit"])
    detection = detection_from_settings(settings["detection"])
    bounds = OrderBounds((1, fit["max_order"]), (1, fit["max_order"]), (0, fit["max_delay"]))
    session_dir, out = Path(args.sessions), Path(args.out)
    ids = discover_subjects(session_dir)
    if args.subject:
        missing = sorted(set(args.subject) - set(ids))
        if missing:
            raise InputError(f"subject: not found in {session_dir}: {', '.join(missing)}")
        ids = [s for s in ids if s in args.subject]
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(session_dir), str(out), sid, detection, bounds, fit["selection"]) for sid in ids]
    results = _map_subjects(_fit_one, jobs, fit["workers"])
    summary = {
        "selection": fit["selection"],
        "bounds": {"max_order": fit["max_order"], "max_delay": fit["max_delay"]},
        "detection": detection.to_dict(),
        "subjects": results,
    }
    _write_json(out / FIT_SUMMARY, summary)
    n_models = sum(r["n_models"] for r in results)
    skipped = [f for r in results for f in r["failures"]]
    notes = [w for r in results for w in r["warnings"]]
    print(f"fit: {n_models} models for {len(results)} subjects ({fit['selection']} selection) in {out}")
    for line in skipped:
        print(f"  skipped: {line}")
    for line in notes:
        print(f"  warning: {line}")
    return EXIT_WARN if skipped or notes else EXIT_OK


# ---------------------------------------------------------------- evaluate

def _evaluate_one(job):
    session_dir, model_dir, sid, detection, mode = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        session = _load_valid_session(Path(session_dir), sid)
        subject = prepare_subject(session, detection)
    subject_models = Path(model_dir) / "models" / sid
    if not subject_models.is_dir():
        raise InputError(f"models: no models for subject {sid} under {subject_models}")
    models = {}
    notes = [str(w.message) for w in caught]
    for label in subject.intervals:
        for feature in MODELLED_FEATURES:
            path = _model_path(Path(model_dir), sid, feature, label)
            if not path.is_file():
                notes.append(f"{sid} {feature.value} {label}: model file missing ({path.name})")
                continue
            try:
                model, feat, lab = load_model(path)
            except (ValueError, KeyError) as exc:
                raise InputError(f"models: {path}: {exc}") from exc
            if (feat, lab) != (feature.value, label):
                raise InputError(f"models: {path} holds {feat} {lab}")
            models[(feature, label)] = model
    errors, eval_notes = evaluate_subject(subject, models, mode)
    return errors, notes + eval_notes


def cmd_evaluate(args, settings) -> int:
    if args.error_mode is not None:
        settings["eval"]["error_mode"] = args.error_mode
    if args.workers is not None:
        settings["eval"]["workers"] = str(args.workers)
    ev = eval_from_settings(settings["eval"])
    session_dir, model_dir, out = Path(args.sessions), Path(args.models), Path(args.out)
    if not model_dir.is_dir():
        raise InputError(f"models: directory not found: {model_dir}")
    detection_given = settings["detection"]
    summary_path = model_dir / FIT_SUMMARY
    if summary_path.is_file() and not detection_given:
        # evaluate on exactly the beats the models were fitted on
        detection = DetectionConfig.from_dict(json.loads(summary_path.read_text(encoding="utf-8"))["detection"])
    else:
        detection = detection_from_settings(detection_given)
    ids = discover_subjects(session_dir)
    jobs = [(str(session_dir), str(model_dir), sid, detection, ev["error_mode"]) for sid in ids]
    results = _map_subjects(_evaluate_one, jobs, ev["workers"])
    errors = [s for errs, _ in results for s in errs]
    notes = [n for _, ns in results for n in ns]
    if not errors:
        raise InputError("models: no error series could be computed")
    extra = {
        "error_mode": ev["error_mode"],
        "group_by": ev["group_by"],
        "alpha": ev["alpha"],
        "subjects": ids,
        "warnings": notes,
    }
    report, written = write_report(errors, out, ev["alpha"], ev["group_by"], extra)
    n_model = sum(s.error_type == "model" for s in errors)
    print(
        f"evaluate: {n_model} model-error and {len(errors) - n_model} prediction-error series "
        f"from {len(ids)} subjects; {len(written)} files in {out}"
    )
    if report.consistency:
        print(f"  unequal subject pairs: {report.total_unequal} of {report.total_pairs}")
    for line in report.notes + notes:
        print(f"  note: {line}")
    return EXIT_WARN if (report.notes or notes) else EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [synth], [detection], [fit] and [eval] sections")
    common.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="ppgbp",
        description="Identify PPG-to-BP ARX models per breathing interval and score them.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic breath-hold sessions",
                       epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True, help="output directory for session and ground-truth files")
    p.add_argument("--subjects", type=int, help="number of subjects (default 15)")
    p.add_argument("--seed", type=int, help="base seed; subject i uses seed*1000+i (default 1)")
    p.add_argument("--noise-sd", type=float, help="beat-level BP noise SD in mmHg; 0 also silences PPG beat noise")
    p.add_argument("--ppg-noise-sd", type=float, help="relative PPG beat amplitude noise")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="grid-search ARX models for every interval",
                       epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--sessions", required=True, help="directory with <id>_recording.csv and <id>_annotations.csv")
    p.add_argument("--out", required=True, help="output directory for models/, grids/ and fit_summary.json")
    p.add_argument("--subject", action="append", help="restrict to this subject id (repeatable)")
    p.add_argument("--selection", choices=("mse", "aic"), help="model choice per interval (default mse)")
    p.add_argument("--workers", type=int, help="parallel processes (default 1)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", parents=[common], help="model and prediction errors, tables and statistics",
                       epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--sessions", required=True, help="directory with the session files")
    p.add_argument("--models", required=True, help="output directory of a previous fit run")
    p.add_argument("--out", required=True, help="output directory for the report files")
    p.add_argument("--error-mode", choices=ERROR_MODES, help="how estimates are produced (default free-run)")
    p.add_argument("--workers", type=int, help="parallel processes (default 1)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        logging.getLogger("ppgbp").setLevel(logging.ERROR)
    try:
        settings = load_settings(args.config, args.set)
        return args.func(args, settings)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
