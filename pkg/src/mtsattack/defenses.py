"""Defenses: multiplicative-noise augmentation, randomized smoothing, mini-max training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attacks import init_sparse_layer, sparse_layer_node, sparse_layer_draws
from .diffkit import Graph, stack
from .models import (
    LINEAR_VAR,
    FitConfig,
    PredictiveSamples,
    TrainingDivergedError,
    Window,
    _check_dataset,
    batch_arrays,
    compute_scale,
    draw_noise,
    fit,
    init_params,
    model_step,
    rollout,
)
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.1
    n: int = 100
    seed: int | None = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class MinimaxConfig:
    k: int | None = None  # defaults to ceil(d / 2)
    epochs: int = 100
    attacker_steps: int = 1
    model_steps: int = 1
    attacker_lr: float = 0.05
    model_lr: float = 1e-2
    draws: int = 8
    mean_paths: int = 4
    eta: float = 0.5
    temperature: float = 0.1
    batch_windows: int | None = None
    seed: int = 0
    zero_perturbation: bool = False

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def jitter(x, sigma, rng):
    """``x * (1 + xi)`` with ``xi ~ N(0, sigma^2)`` i.i.d."""
    x = np.asarray(x, dtype=np.float64)
    return x * (1.0 + sigma * rng.standard_normal(x.shape))


def augment(window, sigma, seed=None):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return window
    rng = np.random.default_rng(seed)
    return Window(jitter(window.x, sigma, rng), window.y_true, window.item_ids, window.timestamps,
                  window.window_id, window.start)


def augmented_fit(dataset, config=None, sigma=0.1, seed=0, copies=4):
    """Fit on multiplicatively jittered histories.

    The least-squares path trains on ``copies`` jittered replicas; gradient
    training draws fresh noise every epoch.
    """
    config = config or FitConfig()
    _check_dataset(dataset)
    rng = np.random.default_rng([seed, 11])
    if config.kind == LINEAR_VAR and config.method in ("auto", "ols"):
        scale = compute_scale(dataset)
        reps = [Window(jitter(w.x, sigma, rng), w.y_true, w.item_ids, w.timestamps, w.window_id, w.start)
                for _ in range(copies) for w in dataset]
        params = fit(reps, config)
        params = replace(params, scale=scale)
    else:
        params = _fit_with_transform(dataset, config, lambda X: jitter(X, sigma, rng))
    return replace(params, metadata={"defense": {"kind": "augmentation", "sigma": sigma, "seed": seed}})


def _fit_with_transform(dataset, config, transform):
    d, tau = _check_dataset(dataset)
    params = init_params(config.kind, d, tau, compute_scale(dataset), order=config.order,
                         hidden=config.hidden, rank=config.rank, seed=config.seed)
    X, Y = batch_arrays(dataset)
    opt = Adam(params.arrays, lr=config.lr, clip_norm=config.clip_norm)
    arrays = dict(params.arrays)
    for _ in range(config.epochs):
        arrays, _ = model_step(params.with_arrays(arrays), opt, arrays, transform(X), Y)
    return params.with_arrays(arrays)


def smoothed_sample_paths(params, x, cfg):
    """One path per multiplicatively jittered copy of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    eps = draw_noise(rng, params, 1, cfg.n)  # same draw order as sample_paths
    eps = np.swapaxes(eps, 0, 1)
    xi = rng.standard_normal((cfg.n,) + x.shape) * cfg.sigma
    g = Graph()
    steps = rollout(params, g.const(x[None] * (1.0 + xi)), eps)
    paths = np.stack([s.value[:, 0] for s in steps], axis=-1)
    return PredictiveSamples(paths, cfg.seed)


# --------------------------------------------------------------------------
# mini-max


def _deviation_loss(params, theta, arrays, X, Y, k, rng, cfg):
    """``-mean || E_y[y] - y_true ||_2`` over windows and sparse-layer draws (scaled units)."""
    g = Graph()
    leaves = {name: g.leaf(name, v) for name, v in arrays.items()}
    B, d, T = X.shape
    m = cfg.draws
    z = rng.standard_normal((B, m, d, T))
    u = rng.standard_normal((B, m, d))
    delta = sparse_layer_node(g, leaves, theta, X, k, z, u, cfg.temperature)  # (B, m, d, T)
    base = g.const(X[:, None]) * (1.0 + delta)
    base = base.reshape(B * m, d, T)
    eps = draw_noise(rng, params, B * m, cfg.mean_paths)
    steps = rollout(params, base, eps)
    inv = 1.0 / params.scale
    paths = stack(steps, axis=-1)  # (B m, n, d, tau)
    mean = paths.mean(axis=1) * g.const(inv[:, None])
    truth = np.repeat(Y, m, axis=0) * inv[:, None]
    err = mean - g.const(truth)
    norm = ((err * err).sum(axis=(1, 2)) + 1e-12).sqrt()
    loss = -norm.mean()
    return g, loss


def minimax_train(dataset, mcfg=None, fit_config=None, *, init=None, history=None):
    """Alternate sparse-layer attacker updates with likelihood updates of the forecaster.

    The attacker maximizes the deviation of the forecast mean from the truth;
    the forecaster then maximizes the likelihood of the truth given the
    attacker's perturbed histories.  The attacker is not told which rows are
    targets, so no rows are forced to zero.  ``init`` warm-starts the
    forecaster (e.g. from a clean fit); otherwise it is initialized exactly as
    :func:`fit` would.
    """
    mcfg = mcfg or MinimaxConfig()
    fit_config = fit_config or FitConfig()
    d, tau = _check_dataset(dataset)
    k = mcfg.k if mcfg.k is not None else math.ceil(d / 2)
    if not 1 <= k <= d:
        raise ValueError(f"defender sparsity k={k} outside [1, {d}]")
    X, Y = batch_arrays(dataset)
    params = init or init_params(fit_config.kind, d, tau, compute_scale(dataset), order=fit_config.order,
                                 hidden=fit_config.hidden, rank=fit_config.rank, seed=fit_config.seed)
    theta = init_sparse_layer(d, X.shape[2], params.scale, mcfg.eta, seed=[mcfg.seed, 21])
    att_arrays = theta.arrays()
    att_opt = Adam(att_arrays, lr=mcfg.attacker_lr, clip_norm=10.0)
    mod_arrays = dict(params.arrays)
    mod_opt = Adam(mod_arrays, lr=mcfg.model_lr, clip_norm=fit_config.clip_norm)
    att_rng = np.random.default_rng([mcfg.seed, 22])
    batch_rng = np.random.default_rng([mcfg.seed, 23])
    trace = [] if history is None else history
    stable = params
    for epoch in range(mcfg.epochs):
        if mcfg.batch_windows is not None and mcfg.batch_windows < len(dataset):
            idx = np.sort(batch_rng.choice(len(dataset), mcfg.batch_windows, replace=False))
            Xb, Yb = X[idx], Y[idx]
        else:
            Xb, Yb = X, Y
        current = params.with_arrays(mod_arrays)
        try:
            if not mcfg.zero_perturbation:
                for _ in range(mcfg.attacker_steps):
                    g, loss = _deviation_loss(current, theta.with_arrays(att_arrays), att_arrays, Xb, Yb, k, att_rng, mcfg)
                    att_arrays = att_opt.step(att_arrays, g.backward(loss))
            layer = theta.with_arrays(att_arrays)
            for _ in range(mcfg.model_steps):
                if mcfg.zero_perturbation:
                    Xp, Yp = Xb, Yb
                else:
                    deltas = np.stack([sparse_layer_draws(layer, x, k, mcfg.draws, att_rng) for x in Xb])
                    Xp = (Xb[:, None] * (1.0 + deltas)).reshape(-1, *Xb.shape[1:])
                    Yp = np.repeat(Yb, mcfg.draws, axis=0)
                mod_arrays, nll = model_step(params.with_arrays(mod_arrays), mod_opt, mod_arrays, Xp, Yp)
                trace.append(-nll)
        except (TrainingDivergedError, FloatingPointError) as exc:
            err = TrainingDivergedError(f"mini-max training diverged at epoch {epoch}: {exc}")
            err.last_stable = stable
            raise err from exc
        stable = params.with_arrays(mod_arrays)
    meta = {"defense": {"kind": "minimax", "k": k, **{f: v for f, v in asdict(mcfg).items() if f != "k"}}}
    return replace(stable, metadata=meta)
