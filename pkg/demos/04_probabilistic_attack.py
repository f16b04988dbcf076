"""
Probabilistic sparse-layer attack
=================================

Train a sparse layer whose draws are zero row-wise with probability 1 - r_i
and Gaussian otherwise, then sample hard-masked perturbations from it.  The
expected number of perturbed rows is at most k.
"""

import numpy as np

from mtsattack import data
from mtsattack.attacks import (
    AttackSpec,
    ProbAttackConfig,
    draw_target,
    expected_sparsity,
    gate_probs,
    probabilistic_attack,
    probabilistic_attack_train,
    sparse_attack_objective,
)
from mtsattack.metrics import evaluate_samples
from mtsattack.models import FitConfig, LINEAR_VAR, fit, sample_paths

ds = data.generate(data.coupled_var_spec(seed=0))
train, ev = data.train_eval_windows(ds, 96, 24, n_eval=20)
params = fit(train, FitConfig(kind=LINEAR_VAR, horizon=24))
w = ev[0]

spec = AttackSpec(k=5, targets=(0,), horizons=(24,), c1=2.0, eta=0.5)
t = draw_target(params, w.x, spec, seed=0)

trace = []
theta = probabilistic_attack_train(params, w, spec, ProbAttackConfig(steps=100), seed=0, t=t, trace=trace)
print("relaxed objective: first %.3f, last %.3f" % (trace[0], trace[-1]))
print("hard-mask objective: %.3f" % sparse_attack_objective(params, w, theta, spec, t, n=500, seed=1))

r = gate_probs(theta.gamma, spec.k)
print("gate probabilities:", np.round(r, 2))
print("expected sparsity %.2f <= k = %d" % (expected_sparsity(theta.gamma, spec.k), spec.k))

clean = evaluate_samples(sample_paths(params, w.x, 100, seed=1), w.y_true, (0,), (24,))["avg_wql"]
scores = []
for s in range(5):
    pert = probabilistic_attack(theta, w, spec, seed=s)
    m = evaluate_samples(sample_paths(params, w.x * (1 + pert.delta), 100, seed=1), w.y_true, (0,), (24,))
    scores.append(m["avg_wql"])
    print(f"draw {s}: {pert.sparsity} rows perturbed, avg wQL {m['avg_wql']:.3f}")
print("no attack %.3f, mean over draws %.3f" % (clean, np.mean(scores)))
