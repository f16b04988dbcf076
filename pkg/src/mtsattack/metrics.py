"""Forecast metrics: weighted quantile loss, its alpha-grid average, WAPE and WSE."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import PredictiveSamples

ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class QuantileForecast:
    """``q[a]`` is the alpha-quantile array (d, tau) for ``alphas[a]``."""

    q: np.ndarray
    alphas: tuple
    n: int

    def at(self, alpha):
        return self.q[self.alphas.index(alpha)]


def empirical_quantiles(samples, grid=ALPHAS):
    """Order-statistic quantiles with linear interpolation between ranks."""
    if not grid:
        raise ValueError("empty quantile grid")
    paths = samples.paths if isinstance(samples, PredictiveSamples) else np.asarray(samples, dtype=np.float64)
    if paths.shape[0] < 2:
        raise ValueError("need at least two sample paths for quantiles")
    grid = tuple(sorted(float(a) for a in grid))
    q = np.quantile(paths, grid, axis=0, method="linear")
    # interpolation is monotone in alpha up to rounding; enforce it exactly
    q = np.maximum.accumulate(q, axis=0)
    return QuantileForecast(q, grid, paths.shape[0])


def _scope(arr, targets=None, horizons=None):
    arr = np.asarray(arr, dtype=np.float64)
    if targets is not None:
        arr = arr[..., list(targets), :]
    if horizons is not None:
        arr = arr[..., [h - 1 for h in horizons]]
    return arr


def pinball(x, q, alpha):
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return alpha * np.maximum(x - q, 0.0) + (1.0 - alpha) * np.maximum(q - x, 0.0)


def wql(x_true, q, alpha):
    """``2 * sum pinball(x, q; alpha) / sum |x|`` over every entry given."""
    x = np.asarray(x_true, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if x.shape != q.shape:
        raise ValueError(f"truth shape {x.shape} != quantile shape {q.shape}")
    denom = np.sum(np.abs(x))
    if denom == 0:
        raise ValueError("wQL is undefined for an all-zero truth")
    return float(2.0 * np.sum(pinball(x, q, alpha)) / denom)


def avg_wql(x_true, forecast, targets=None, horizons=None):
    """Mean of :func:`wql` over the forecast's alpha grid (optionally on a sub-scope)."""
    x = _scope(x_true, targets, horizons)
    return float(np.mean([wql(x, _scope(forecast.q[a], targets, horizons), alpha)
                          for a, alpha in enumerate(forecast.alphas)]))


def wql_per_alpha(x_true, forecast, targets=None, horizons=None):
    x = _scope(x_true, targets, horizons)
    return {alpha: wql(x, _scope(forecast.q[a], targets, horizons), alpha) for a, alpha in enumerate(forecast.alphas)}


def wape_wse(x_true, samples, targets, horizons):
    """Absolute and squared relative deviation of the sample mean, averaged over (I, H)."""
    paths = samples.paths if isinstance(samples, PredictiveSamples) else np.asarray(samples, dtype=np.float64)
    truth = _scope(x_true, targets, horizons)
    if np.any(truth == 0):
        raise ValueError("WAPE/WSE need nonzero truth on every (i, h) in scope")
    pred = _scope(paths.mean(axis=0), targets, horizons)
    rel = pred / truth - 1.0
    return float(np.mean(np.abs(rel))), float(np.mean(rel ** 2))


@dataclass
class MetricsReport:
    """Per-window metric values plus their mean and std."""

    values: dict = field(default_factory=dict)  # metric -> list of per-window values
    scope: str = "target"

    def add(self, **metrics):
        for k, v in metrics.items():
            self.values.setdefault(k, []).append(float(v))

    def summary(self):
        return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in self.values.items()}

    def to_json(self):
        return json.dumps({"scope": self.scope, "values": self.values, "summary": self.summary()}, sort_keys=True)

    def csv_row(self, label=""):
        buf = io.StringIO()
        summ = self.summary()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([label, *(format_mean_std(summ[k]["mean"], summ[k]["std"]) for k in sorted(summ))])
        return buf.getvalue()


def format_mean_std(mean, std):
    return f"{mean!r}±{std!r}"


def parse_mean_std(text):
    mean, std = text.split("±")
    return float(mean), float(std)


def evaluate_samples(samples, y_true, targets, horizons, grid=ALPHAS):
    """All metrics for one window: target-scope and full-grid."""
    fc = empirical_quantiles(samples, grid)
    wape, wse = wape_wse(y_true, samples, targets, horizons)
    return {
        "avg_wql": avg_wql(y_true, fc, targets, horizons),
        "avg_wql_full": avg_wql(y_true, fc),
        "wape": wape,
        "wse": wse,
    }
