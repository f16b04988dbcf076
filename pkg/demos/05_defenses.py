"""
Three defenses against the same attack
======================================

Compare an undefended forecaster with data augmentation, randomized
smoothing and mini-max adversarial training.  Each defended model is
attacked directly (white box), and the smoothing attack averages over
jittered histories.
"""

from mtsattack import data
from mtsattack.attacks import AttackSpec, deterministic_attack
from mtsattack.defenses import MinimaxConfig, SmoothingConfig, augmented_fit, minimax_train, smoothed_sample_paths
from mtsattack.metrics import evaluate_samples
from mtsattack.models import FitConfig, LINEAR_VAR, fit, sample_paths

ds = data.generate(data.coupled_var_spec(seed=0))
train, ev = data.train_eval_windows(ds, 96, 24, n_eval=20)
fc = FitConfig(kind=LINEAR_VAR, horizon=24, rank=0)

plain = fit(train, fc)
augmented = augmented_fit(train, fc, sigma=0.1, seed=0)
robust = minimax_train(train, MinimaxConfig(epochs=300, batch_windows=32, seed=0), fc, init=plain)

spec = AttackSpec(k=7, targets=(0,), horizons=(24,), c1=2.0, eta=0.5, iterations=50)
smooth = SmoothingConfig(sigma=0.1, n=100, seed=1)


def score(params, x, w, smoothing=None):
    if smoothing is None:
        s = sample_paths(params, x, 100, seed=1)
    else:
        s = smoothed_sample_paths(params, x, smoothing)
    return evaluate_samples(s, w.y_true, (0,), (24,))["avg_wql"]


arms = {
    "none": (plain, None),
    "augmentation": (augmented, None),
    "smoothing": (augmented, smooth),
    "minimax": (robust, None),
}
for w in ev[:3]:
    print(f"window {w.window_id}")
    for name, (params, sm) in arms.items():
        attack_sm = SmoothingConfig(0.1, 32, seed=0) if sm is not None else None
        pert = deterministic_attack(params, w, spec, seed=0, smoothing=attack_sm)
        print(f"  {name:>12s}: clean {score(params, w.x, w, sm):.3f}"
              f"  attacked {score(params, w.x * (1 + pert.delta), w, sm):.3f}")
