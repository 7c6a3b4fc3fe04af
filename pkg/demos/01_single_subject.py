"""Walk one synthetic subject through beat extraction, resampling and ARX fitting.

Run with ``python demos/01_single_subject.py``.
"""

# %% Generate a recording with a known PPG -> BP coupling
import numpy as np

from ppgbp import (
    Feature,
    ProtocolConfig,
    evaluate_subject,
    fit_subject,
    generate_session,
    prepare_subject,
    rmse,
    select_models,
)

config = ProtocolConfig(rng_seed=42)
session, truth = generate_session(config, "D01")
print(f"{session.subject_id}: {len(session.bp) / session.bp.sample_rate_hz:.0f} s at {session.bp.sample_rate_hz:.0f} Hz")
for ann in session.annotations:
    print(f"  {ann.label:4s} {ann.start_s:7.1f} .. {ann.end_s:7.1f} s")

# %% Beats and uniform tracks
subject = prepare_subject(session)
sbp = subject.features[Feature.SBP]
print(f"\n{len(sbp)} SBP beats, mean {np.mean(sbp.values):.1f} mmHg")
print(f"max deviation from the generator's beats: {np.max(np.abs(sbp.values - truth.sbp)):.4f} mmHg")

# %% One grid search per interval and feature
outcome = fit_subject(subject)
models = select_models(outcome)
for label in ("NB1", "BH1"):
    res = outcome.results[(Feature.SBP, label)]
    best = res.best_by_mse
    print(f"\nSBP {label}: best by MSE {best.orders}, by AIC {res.best_by_aic.orders}")
    print(f"  a = {np.round(best.a, 3)}, b = {np.round(best.b, 3)}, stable: {best.is_stable()}")

# %% Model error against prediction error
errors, notes = evaluate_subject(subject, models)
for kind in ("model", "prediction"):
    values = [rmse(e.residuals) for e in errors if e.error_type == kind and e.feature == Feature.SBP]
    print(f"SBP {kind} rMSE: median {np.median(values):.2f} mmHg over {len(values)} series")
