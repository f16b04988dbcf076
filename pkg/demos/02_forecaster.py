"""
Fit a forecaster and score its sample paths
===========================================

Generate the coupled VAR benchmark, fit the linear-VAR forecaster by least
squares, draw Monte-Carlo forecast paths for one backtest window and score
them with the weighted quantile loss.
"""

import numpy as np

from mtsattack import data
from mtsattack.metrics import evaluate_samples
from mtsattack.models import FitConfig, LINEAR_VAR, fit, predictive_mean_closed_form, sample_paths

ds = data.generate(data.coupled_var_spec(d=10, length=3000, seed=0))
train, ev = data.train_eval_windows(ds, T=96, tau=24, n_eval=20)
print(f"{ds.d} series of length {ds.L}: {len(train)} training windows, {len(ev)} backtest windows")

params = fit(train, FitConfig(kind=LINEAR_VAR, horizon=24))

w = ev[-1]
samples = sample_paths(params, w.x, 100, seed=0)
print("paths:", samples.paths.shape)

# the sample mean agrees with the exact predictive mean of the linear model
exact = predictive_mean_closed_form(params, w.x, 24)
print("24-step mean of series 0: MC %.3f, exact %.3f" % (samples.mean()[0, -1], exact[0]))

m = evaluate_samples(samples, w.y_true, targets=(0,), horizons=(24,))
for key, val in m.items():
    print(f"{key:>13s}: {val:.4f}")
