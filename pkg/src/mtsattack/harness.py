"""Experiment runner: train, defend, attack over a sparsity sweep, tabulate, report."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .attacks import (
    AttackSpec,
    ProbAttackConfig,
    Perturbation,
    draw_target,
    pgd_dense,
    probabilistic_attack,
    probabilistic_attack_train,
    sparsify_topk,
)
from .defenses import MinimaxConfig, SmoothingConfig, augmented_fit, minimax_train, smoothed_sample_paths
from .metrics import evaluate_samples, format_mean_std, parse_mean_std
from .models import FitConfig, LINEAR_VAR, fit, sample_paths

log = logging.getLogger(__name__)

SCHEMA = 1
DEFENSES = ("none", "augmentation", "smoothing", "minimax")
NO_ATTACK = "no attack"
FULL_ATTACK = "full attack"
METRICS = ("avg_wql", "wape", "wse")
OUTPUT_ENV = "MTSATTACK_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _default_defenses():
    return {
        "none": {},
        "augmentation": {"sigma": 0.1, "copies": 4},
        "smoothing": {"sigma": 0.1, "n": 100, "attack_paths": 32},
        "minimax": {"epochs": 300, "model_lr": 1e-2, "batch_windows": 32, "warm_start": True},
    }


@dataclass
class ExperimentConfig:
    """Everything needed to rerun a table bit-exactly.

    ``dataset`` is ``{"source": "synthetic", "kind": "coupled-var", ...}`` or
    ``{"source": "csv", "path": ...}``.  ``attack`` holds :class:`AttackSpec`
    fields except ``k`` and ``c1``; the target scales come from ``c1``.
    """

    dataset: dict = field(default_factory=lambda: {"source": "synthetic", "kind": "coupled-var",
                                                   "d": 10, "length": 3000, "seed": 0})
    model: dict = field(default_factory=lambda: {"kind": LINEAR_VAR, "rank": 0})
    attack: dict = field(default_factory=lambda: {"targets": [0], "horizons": [24], "eta": 0.5,
                                                  "iterations": 50, "n_grad": 32})
    attack_kind: str = "deterministic"
    prob_attack: dict = field(default_factory=dict)
    c1: list = field(default_factory=lambda: [0.5, 2.0])
    sweep: list = field(default_factory=lambda: [1, 3, 5, 7, 9])
    full_attack: bool = True
    defenses: dict = field(default_factory=_default_defenses)
    scope: str = "target"
    T: int = 96
    tau: int = 24
    n_eval: int = 20
    train_stride: int | None = None
    eval_paths: int = 100
    seed: int = 0
    output_dir: str = "results"
    schema: int = SCHEMA

    # ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if obj.get("schema", SCHEMA) != SCHEMA:
            raise ConfigError(f"unsupported config schema {obj.get('schema')!r}")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def d(self):
        if self.dataset.get("source") == "csv":
            return None
        return int(self.dataset.get("d", 10))

    def validate(self, d=None):
        if self.attack_kind not in ("deterministic", "probabilistic"):
            raise ConfigError(f"unknown attack kind {self.attack_kind!r}")
        for name in self.defenses:
            if name not in DEFENSES:
                raise ConfigError(f"unknown defense {name!r}")
        if not self.c1:
            raise ConfigError("c1 list is empty")
        if self.scope not in ("target", "full"):
            raise ConfigError(f"unknown metric scope {self.scope!r}")
        d = d if d is not None else self.d()
        n_targets = len(set(self.attack.get("targets", [0])))
        if d is not None:
            for k in self.sweep:
                if not 1 <= k <= d - n_targets:
                    raise ConfigError(f"sweep value k={k} outside [1, {d - n_targets}]")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an explicit integer")
        return self

    def resolved_output_dir(self):
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def rows(self, d):
        rows = [NO_ATTACK] + [f"k={k}" for k in self.sweep]
        if self.full_attack:
            full = d - len(set(self.attack.get("targets", [0])))
            rows.append(FULL_ATTACK)
            if full in self.sweep:
                log.info("full attack k=%d duplicates a sweep row", full)
        return rows


def row_k(label, d, n_targets):
    if label == NO_ATTACK:
        return 0
    if label == FULL_ATTACK:
        return d - n_targets
    return int(label.split("=")[1])


# --------------------------------------------------------------------------
# result table


@dataclass
class ResultTable:
    """``cells[(row, column)] = {"status", metric: {"mean", "std", "values"}, "diagnostic"}``."""

    rows: list
    columns: list
    cells: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def cell(self, row, column):
        return self.cells[(row, column)]

    def complete(self):
        return all(self.cells.get((r, c), {}).get("status") == "ok" for r in self.rows for c in self.columns)

    def mean(self, row, column, metric="avg_wql"):
        return self.cells[(row, column)][metric]["mean"]

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "rows": list(self.rows),
            "columns": list(self.columns),
            "cells": [{"row": r, "column": c, **self.cells[(r, c)]}
                      for r in self.rows for c in self.columns if (r, c) in self.cells],
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, obj):
        if obj.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported table schema {obj.get('schema')!r}")
        cells = {}
        for c in obj["cells"]:
            c = dict(c)
            cells[(c.pop("row"), c.pop("column"))] = c
        return cls(list(obj["rows"]), list(obj["columns"]), cells, obj.get("meta", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self, metric="avg_wql"):
        """Wide table: one row per sparsity, ``mean±std`` per defense."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sparsity", *self.columns])
        for r in self.rows:
            out = [r]
            for c in self.columns:
                cell = self.cells.get((r, c), {})
                if cell.get("status") == "ok":
                    out.append(format_mean_std(cell[metric]["mean"], cell[metric]["std"]))
                else:
                    out.append("failed")
            w.writerow(out)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, metric="avg_wql"):
        rd = list(csv.reader(io.StringIO(text)))
        columns = rd[0][1:]
        rows, cells = [], {}
        for line in rd[1:]:
            rows.append(line[0])
            for c, txt in zip(columns, line[1:]):
                if txt == "failed":
                    cells[(line[0], c)] = {"status": "failed"}
                else:
                    mean, std = parse_mean_std(txt)
                    cells[(line[0], c)] = {"status": "ok", metric: {"mean": mean, "std": std}}
        return cls(rows, columns, cells)

    def to_tsv(self, metric="avg_wql"):
        """Plot-ready: ``k`` column then one mean column per defense (no-attack row is k=0)."""
        d = self.meta.get("d")
        n_targets = self.meta.get("n_targets", 1)
        lines = ["\t".join(["k", *self.columns])]
        for r in self.rows:
            k = row_k(r, d, n_targets) if d is not None or r != FULL_ATTACK else r
            vals = []
            for c in self.columns:
                cell = self.cells.get((r, c), {})
                vals.append(repr(cell[metric]["mean"]) if cell.get("status") == "ok" else "nan")
            lines.append("\t".join([str(k), *vals]))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# pieces


def load_dataset(cfg):
    src = dict(cfg.dataset)
    kind = src.pop("source", "synthetic")
    if kind == "csv":
        ds = data_mod.load_csv(src["path"], min_length=cfg.T + cfg.tau)
        return ds.select(src["item_ids"]) if src.get("item_ids") else ds
    if kind != "synthetic":
        raise ConfigError(f"unknown dataset source {kind!r}")
    gen = src.pop("kind", "coupled-var")
    if gen == "coupled-var":
        spec = data_mod.coupled_var_spec(**src)
    elif gen == "electricity-like":
        spec = data_mod.electricity_like_spec(**src)
    else:
        raise ConfigError(f"unknown synthetic generator {gen!r}")
    return data_mod.generate(spec)


def windows(cfg, dataset=None):
    dataset = dataset if dataset is not None else load_dataset(cfg)
    return data_mod.train_eval_windows(dataset, cfg.T, cfg.tau, cfg.n_eval, cfg.train_stride)


def fit_config(cfg):
    return FitConfig(**{"horizon": cfg.tau, "seed": cfg.seed, **cfg.model})


def train_model(cfg, train):
    return fit(train, fit_config(cfg))


def defended_model(cfg, name, train, base=None):
    """Forecaster used by one defense column (smoothing reuses the augmented model)."""
    opts = dict(cfg.defenses.get(name, {}))
    fc = fit_config(cfg)
    if name == "none":
        return base if base is not None else fit(train, fc)
    if name in ("augmentation", "smoothing"):
        sigma = opts.get("sigma", 0.1)
        return augmented_fit(train, fc, sigma=sigma, seed=cfg.seed, copies=opts.get("copies", 4))
    if name == "minimax":
        warm = opts.pop("warm_start", True)
        mcfg = MinimaxConfig(**{"seed": cfg.seed, **opts})
        init = None
        if warm:
            init = base if base is not None else fit(train, fc)
        return minimax_train(train, mcfg, fc, init=init)
    raise ConfigError(f"unknown defense {name!r}")


def smoothing_configs(cfg, name, seed):
    """(attack-time, evaluation-time) smoothing configs, or (None, None)."""
    if name != "smoothing":
        return None, None
    opts = cfg.defenses.get("smoothing", {})
    sigma = opts.get("sigma", 0.1)
    return (SmoothingConfig(sigma, opts.get("attack_paths", 32), seed),
            SmoothingConfig(sigma, opts.get("n", cfg.eval_paths), seed))


def attack_spec(cfg, k, c1):
    return AttackSpec(k=max(k, 1), c1=c1, **{key: tuple(v) if isinstance(v, list) else v
                                              for key, v in cfg.attack.items()})


def _window_seed(cfg, window, c_index):
    return int(np.random.SeedSequence([cfg.seed, window.window_id, c_index]).generate_state(1)[0])


def evaluate_window(params, window, delta, cfg, seed, smooth_eval=None):
    targets = tuple(cfg.attack.get("targets", [0]))
    horizons = tuple(cfg.attack.get("horizons", [cfg.tau]))
    x = window.x * (1.0 + delta)
    if smooth_eval is not None:
        samples = smoothed_sample_paths(params, x, replace(smooth_eval, seed=[seed, 7]))
    else:
        samples = sample_paths(params, x, cfg.eval_paths, seed=[seed, 7])
    m = evaluate_samples(samples, window.y_true, targets, horizons)
    if cfg.scope == "full":
        m["avg_wql"] = m["avg_wql_full"]
    return m


def window_perturbations(params, window, cfg, ks, c1, seed, smoothing=None):
    """``{k: Perturbation}`` for one window and target scale; deterministic PGD is shared across k."""
    out = {}
    if cfg.attack_kind == "deterministic":
        spec = attack_spec(cfg, max(ks), c1)
        dense, _, _ = pgd_dense(params, window.x, spec, seed, smoothing)
        for k in ks:
            sk = replace(spec, k=k)
            out[k] = sparsify_topk(dense, k, sk.targets, sk.ranking, sk, seed, window.window_id)
    else:
        pcfg = ProbAttackConfig(**cfg.prob_attack)
        t = draw_target(params, window.x, attack_spec(cfg, max(ks), c1), seed)
        for k in ks:
            sk = attack_spec(cfg, k, c1)
            theta = probabilistic_attack_train(params, window, sk, pcfg, seed, smoothing, t=t)
            out[k] = probabilistic_attack(theta, window, sk, seed)
    return out


def _summarize(per_window, diag):
    cell = {"status": "ok", "diagnostics": diag}
    for m in METRICS:
        vals = [float(v[m]) for v in per_window]
        cell[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "values": vals}
    return cell


# --------------------------------------------------------------------------
# runner


def run_experiment(cfg, *, dataset=None, models=None, progress=None):
    """Run every (row, defense) cell; failures are recorded per cell, not raised.

    The reported value per window is the maximum over the configured target
    scales ``c1`` (the WAPE/WSE entries come from the same maximizing scale).
    Seeds depend only on ``(cfg.seed, window, c1 index)``, so every defense
    column sees identical targets, gradient noise and evaluation noise.
    """
    dataset = dataset if dataset is not None else load_dataset(cfg)
    cfg.validate(dataset.d)
    train, ev = data_mod.train_eval_windows(dataset, cfg.T, cfg.tau, cfg.n_eval, cfg.train_stride)
    d = dataset.d
    n_targets = len(set(cfg.attack.get("targets", [0])))
    rows = cfg.rows(d)
    columns = [c for c in DEFENSES if c in cfg.defenses]
    table = ResultTable(rows, columns, meta={"d": d, "n_targets": n_targets, "n_eval": len(ev),
                                             "config": cfg.to_dict()})
    models = dict(models or {})
    base = models.get("none")
    for name in columns:
        try:
            if name not in models:
                if name == "smoothing" and "augmentation" in models:
                    models[name] = models["augmentation"]
                else:
                    models[name] = defended_model(cfg, name, train, base)
                if name == "none":
                    base = models[name]
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            for r in rows:
                table.cells[(r, name)] = {"status": "failed", "diagnostic": f"training: {type(exc).__name__}: {exc}"}
            continue
        params = models[name]
        ks = {r: row_k(r, d, n_targets) for r in rows}
        attack_ks = sorted({k for k in ks.values() if k > 0})
        per_row = {r: [] for r in rows}
        diag = {r: {"max_target_row_abs": 0.0, "max_sparsity": 0, "max_norm": 0.0} for r in rows}
        failed = {}
        for w in ev:
            best = {r: None for r in rows}
            for ci, c1 in enumerate(cfg.c1):
                seed = _window_seed(cfg, w, ci)
                smooth_attack, smooth_eval = smoothing_configs(cfg, name, seed)
                try:
                    perts = window_perturbations(params, w, cfg, attack_ks, c1, seed, smooth_attack) if attack_ks else {}
                except Exception as exc:  # noqa: BLE001
                    for r in rows:
                        if ks[r] > 0:
                            failed.setdefault(r, f"window {w.window_id}: {type(exc).__name__}: {exc}")
                    perts = {}
                for r in rows:
                    if r in failed:
                        continue
                    try:
                        if ks[r] == 0:
                            delta = np.zeros_like(w.x)
                        else:
                            pert = perts[ks[r]]
                            pert.check()
                            if pert.kind == "deterministic" and pert.sparsity > ks[r]:
                                raise AssertionError("sparsity bound violated")
                            delta = pert.delta
                            dg = diag[r]
                            tgt = float(np.max(np.abs(delta[list(pert.spec.targets)])))
                            dg["max_target_row_abs"] = max(dg["max_target_row_abs"], tgt)
                            dg["max_sparsity"] = max(dg["max_sparsity"], pert.sparsity)
                            dg["max_norm"] = max(dg["max_norm"], pert.max_norm)
                        m = evaluate_window(params, w, delta, cfg, seed, smooth_eval)
                    except Exception as exc:  # noqa: BLE001
                        failed[r] = f"window {w.window_id}: {type(exc).__name__}: {exc}"
                        continue
                    if best[r] is None or m["avg_wql"] > best[r]["avg_wql"]:
                        best[r] = m
            for r in rows:
                if r not in failed:
                    per_row[r].append(best[r])
            if progress is not None:
                progress(name, w.window_id)
        for r in rows:
            if r in failed:
                table.cells[(r, name)] = {"status": "failed", "diagnostic": failed[r]}
            else:
                table.cells[(r, name)] = _summarize(per_row[r], diag[r])
    return table


def report(table, out_dir, formats=("json", "csv", "tsv"), stem="table"):
    """Write the table files; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    writers = {"json": table.to_json, "csv": table.to_csv, "tsv": table.to_tsv}
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown report format {fmt!r}")
        path = out_dir / f"{stem}.{fmt}"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(writers[fmt]())
        paths.append(path)
    return paths


def perturbations_to_json(perts):
    return json.dumps([p.to_dict() for p in perts], sort_keys=True)


def perturbations_from_json(text):
    return [Perturbation.from_dict(o) for o in json.loads(text)]
