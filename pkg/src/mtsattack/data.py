"""Datasets: wide-CSV ingestion, seeded synthetic VAR generators, windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .models import Window


class UnstableCoefficientsError(ValueError):
    """Companion matrix has spectral radius >= 1."""


@dataclass(frozen=True)
class Dataset:
    """``values`` is (d, L).  Columns ``>= split`` are held out for evaluation."""

    values: np.ndarray
    item_ids: tuple
    timestamps: tuple = ()
    freq: str = "H"
    split: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be (d, L)")
        if np.isnan(v).any():
            raise ValueError("dataset contains NaN")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.item_ids) != v.shape[0]:
            raise ValueError("one item id per series required")
        if self.timestamps and len(self.timestamps) != v.shape[1]:
            raise ValueError("one timestamp per column required")

    @property
    def d(self):
        return self.values.shape[0]

    @property
    def L(self):
        return self.values.shape[1]

    def with_split(self, split):
        return Dataset(self.values, self.item_ids, self.timestamps, self.freq, split)

    def select(self, item_ids):
        idx = [self.item_ids.index(i) for i in item_ids]
        return Dataset(self.values[idx], [self.item_ids[i] for i in idx], self.timestamps, self.freq, self.split)


# --------------------------------------------------------------------------
# CSV


def load_csv(path, min_length=None):
    """Read a wide CSV: ``timestamp`` column then one numeric column per item."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0].strip() != "timestamp":
        raise ValueError(f"{path}: first header column must be 'timestamp'")
    items = header[1:]
    if not items:
        raise ValueError(f"{path}: no value columns")
    stamps, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        try:
            datetime.fromisoformat(row[0])
        except ValueError as exc:
            raise ValueError(f"{path}: row {r} column 'timestamp': bad ISO-8601 value {row[0]!r}") from exc
        vals = []
        for c, cell in enumerate(row[1:]):
            if cell.strip() == "":
                raise ValueError(f"{path}: missing value at row {r}, column {items[c]!r}")
            try:
                vals.append(float(cell))
            except ValueError as exc:
                raise ValueError(f"{path}: non-numeric value {cell!r} at row {r}, column {items[c]!r}") from exc
        stamps.append(row[0])
        values.append(vals)
    if min_length is not None and len(values) < min_length:
        raise ValueError(f"{path}: {len(values)} rows, need at least {min_length}")
    return Dataset(np.asarray(values).T, items, stamps)


def save_csv(dataset, path):
    stamps = dataset.timestamps or _default_stamps(dataset.L)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *dataset.item_ids])
        for t in range(dataset.L):
            w.writerow([stamps[t], *(repr(float(v)) for v in dataset.values[:, t])])


def _default_stamps(L, start="2015-01-01T00:00:00", hours=1):
    t0 = datetime.fromisoformat(start)
    return tuple((t0 + timedelta(hours=hours * t)).isoformat() for t in range(L))


# --------------------------------------------------------------------------
# synthetic generators


@dataclass
class SyntheticSpec:
    """Seeded VAR generator around a (possibly seasonal) mean level.

    ``x_t - m_t = sum_l A_l (x_{t-l} - m_{t-l}) + noise``; ``m_t`` is the
    constant ``mean`` (kind ``var1``/``varp``) or ``mean * (1 + a sin(...))``
    with a daily period (kind ``seasonal-var``).
    """

    coef: np.ndarray
    noise_sd: float | np.ndarray = 0.1
    length: int = 1000
    seed: int = 0
    kind: str = "var1"
    mean: np.ndarray | float = 0.0
    x0: np.ndarray | None = None
    burn_in: int = 200
    period: int = 24
    amplitude: float = 0.2
    item_ids: tuple = field(default_factory=tuple)


def spectral_radius(coef):
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 2:
        coef = coef[None]
    p, d, _ = coef.shape
    C = np.zeros((d * p, d * p))
    C[:d] = np.concatenate(list(coef), axis=1)
    if p > 1:
        C[d:, :-d] = np.eye(d * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(C))))


def generate(spec):
    coef = np.asarray(spec.coef, dtype=np.float64)
    if coef.ndim == 2:
        coef = coef[None]
    p, d, _ = coef.shape
    if spec.kind == "var1" and p != 1:
        raise ValueError("kind 'var1' needs a single coefficient matrix")
    rho = spectral_radius(coef)
    if rho >= 1.0:
        raise UnstableCoefficientsError(f"companion spectral radius {rho:.4f} >= 1")
    rng = np.random.default_rng(spec.seed)
    mean = np.broadcast_to(np.asarray(spec.mean, dtype=np.float64), (d,))
    sd = np.broadcast_to(np.asarray(spec.noise_sd, dtype=np.float64), (d,))
    burn = 0 if spec.x0 is not None else spec.burn_in
    total = spec.length + burn
    phase = np.linspace(0.0, 2.0 * math.pi, d, endpoint=False)

    def level(t):
        if spec.kind == "seasonal-var":
            return mean * (1.0 + spec.amplitude * np.sin(2.0 * math.pi * (t - burn) / spec.period + phase))
        return mean

    dev = np.zeros((d, total))
    if spec.x0 is not None:
        dev[:, 0] = np.asarray(spec.x0, dtype=np.float64) - level(0)
    noise = rng.standard_normal((d, total)) * sd[:, None]
    for t in range(1, total):
        acc = noise[:, t].copy()
        for l in range(min(p, t)):
            acc += coef[l] @ dev[:, t - 1 - l]
        dev[:, t] = acc
    values = dev + np.stack([level(t) for t in range(total)], axis=1)
    ids = spec.item_ids or tuple(f"item_{i}" for i in range(d))
    return Dataset(values[:, burn:], ids, _default_stamps(spec.length))


def coupled_var_spec(d=10, length=3000, seed=0, target=0, own=0.8, others=0.97,
                     coupling=0.12, noise_sd=0.02, levels=None):
    """Coupled VAR(1) benchmark: ``target`` loads on every other series.

    The non-target series are persistent AR(1) processes with weak random
    cross-talk; the target's own persistence is lower so most of its
    multi-step predictability comes from the other items.
    """
    rng = np.random.default_rng(seed)
    A = np.diag(np.full(d, others))
    for j in range(d):
        if j == target:
            continue
        for i in range(d):
            if i != j and i != target:
                A[j, i] = rng.uniform(-0.01, 0.01)
    A[target] = 0.0
    A[target, target] = own
    for j in range(d):
        if j != target:
            A[target, j] = coupling
    if levels is None:
        levels = rng.uniform(5.0, 20.0, d)
    levels = np.asarray(levels, dtype=np.float64)
    # coupling is specified on relative deviations; similarity keeps the spectrum
    A = (levels[:, None] * A) / levels[None, :]
    return SyntheticSpec(coef=A, noise_sd=np.asarray(noise_sd) * np.asarray(levels), length=length,
                         seed=seed, kind="var1", mean=levels)


def electricity_like_spec(d=10, length=3000, seed=0):
    """Daily-seasonal coupled VAR around positive levels (hourly data stand-in)."""
    spec = coupled_var_spec(d=d, length=length, seed=seed)
    spec.kind = "seasonal-var"
    return spec


# --------------------------------------------------------------------------
# windowing


def make_windows(dataset, T, tau, stride=None, start=0, stop=None):
    """Sliding windows over ``values[:, start:stop]``, anchored at the end.

    The last returned window ends exactly at ``stop`` (the backtest window).
    """
    stride = tau if stride is None else stride
    stop = dataset.L if stop is None else stop
    span = stop - start
    if T + tau > span:
        raise ValueError(f"series length {span} shorter than T + tau = {T + tau}")
    starts = list(range(stop - T - tau, start - 1, -stride))[::-1]
    out = []
    for k, s in enumerate(starts):
        ts = dataset.timestamps[s: s + T + tau] if dataset.timestamps else ()
        out.append(Window(dataset.values[:, s: s + T], dataset.values[:, s + T: s + T + tau],
                          dataset.item_ids, ts, k, s))
    return out


def train_eval_windows(dataset, T, tau, n_eval=20, train_stride=None, eval_stride=None):
    """Training windows strictly before ``split``; ``n_eval`` backtest windows after it.

    ``split`` defaults to ``L - tau - (n_eval - 1) * eval_stride`` so that the
    evaluation futures tile the end of the series.
    """
    eval_stride = tau if eval_stride is None else eval_stride
    split = dataset.split
    if split is None:
        split = dataset.L - tau - (n_eval - 1) * eval_stride
    if split - T < 0 or split > dataset.L - tau:
        raise ValueError("not enough data for the requested split")
    train = make_windows(dataset, T, tau, train_stride, 0, split)
    ev = make_windows(dataset, T, tau, eval_stride, split - T, dataset.L)
    ev = [w for w in ev if w.start + T >= split][-n_eval:]
    ev = [Window(w.x, w.y_true, w.item_ids, w.timestamps, k, w.start) for k, w in enumerate(ev)]
    return train, ev
