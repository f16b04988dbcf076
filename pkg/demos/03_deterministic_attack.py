"""
Sparse indirect attack
======================

Perturb the histories of k non-target series so the 24-step forecast of
series 0 is dragged toward twice a sampled clean forecast.  Series 0 itself
is never touched.
"""

import numpy as np

from mtsattack import data
from mtsattack.attacks import AttackSpec, deterministic_attack
from mtsattack.metrics import evaluate_samples
from mtsattack.models import FitConfig, LINEAR_VAR, fit, predictive_mean_closed_form, sample_paths

ds = data.generate(data.coupled_var_spec(seed=0))
train, ev = data.train_eval_windows(ds, 96, 24, n_eval=20)
params = fit(train, FitConfig(kind=LINEAR_VAR, horizon=24))
w = ev[0]

clean = evaluate_samples(sample_paths(params, w.x, 100, seed=1), w.y_true, (0,), (24,))
print("no attack  avg wQL %.3f" % clean["avg_wql"])

for k in (1, 3, 5, 9):
    spec = AttackSpec(k=k, targets=(0,), horizons=(24,), c1=2.0, eta=0.5, iterations=50)
    pert = deterministic_attack(params, w, spec, seed=0)
    rows = np.flatnonzero(np.any(pert.delta != 0, axis=1))
    attacked = w.x * (1 + pert.delta)
    m = evaluate_samples(sample_paths(params, attacked, 100, seed=1), w.y_true, (0,), (24,))
    shift = predictive_mean_closed_form(params, attacked, 24)[0] - predictive_mean_closed_form(params, w.x, 24)[0]
    print(f"k={k}  rows {rows.tolist()}  mean shift {shift:+.3f}  avg wQL {m['avg_wql']:.3f}"
          f"  target row max |delta| {np.abs(pert.delta[0]).max()}")
