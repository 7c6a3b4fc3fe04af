"""Between-subject comparisons on residuals: a homogeneous cohort against one offset subject.

Run with ``python demos/03_subject_consistency.py``.
"""

# %% A cohort whose residuals share one distribution
import numpy as np

from ppgbp.evaluation import subject_consistency

rng = np.random.default_rng(0)
names = [f"S{i + 1:02d}" for i in range(15)]
sizes = rng.integers(60, 140, len(names))
groups = {nm: rng.normal(0.0, 2.0, n) for nm, n in zip(names, sizes)}
res = subject_consistency(groups)
print(f"homogeneous: F = {res.anova_f:.2f}, p = {res.anova_p:.3f}, {res.n_unequal} of {res.n_pairs} pairs unequal")

# %% Offset one subject by 10 mmHg
groups["S01"] = groups["S01"] + 10.0
res = subject_consistency(groups)
pairs = res.unequal_pairs()
print(f"offset S01: {res.n_unequal} of {res.n_pairs} pairs unequal, {sum('S01' in p for p in pairs)} involve S01")
for pc in res.pairs[:3]:
    print(f"  {pc.first}-{pc.second}: difference {pc.mean_difference:+.2f}, q = {pc.q_statistic:.2f}, p = {pc.p_value:.2g}")
