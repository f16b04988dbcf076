"""Sparse indirect adversarial attacks and defenses for multivariate probabilistic forecasters."""

from . import attacks, data, defenses, diffkit, harness, metrics, models
from .attacks import AttackSpec, Perturbation, deterministic_attack, probabilistic_attack, sparsify_topk
from .defenses import MinimaxConfig, SmoothingConfig, augment, minimax_train, smoothed_sample_paths
from .harness import ExperimentConfig, ResultTable, report, run_experiment
from .metrics import avg_wql, empirical_quantiles, wape_wse, wql
from .models import FitConfig, ForecasterParams, PredictiveSamples, Window, fit, sample_paths

__version__ = "0.1.0"
