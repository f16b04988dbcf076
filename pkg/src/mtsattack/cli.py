"""Command-line entry point: ``mtsattack {train,attack,defend,evaluate,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness as H
from .metrics import MetricsReport
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("mtsattack")


def _load_config(args):
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    return cfg


def _out(cfg):
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
    print(path)


def cmd_train(args):
    cfg = _load_config(args)
    train, _ = H.windows(cfg)
    params = H.train_model(cfg, train)
    path = _out(cfg) / "model.json"
    save_checkpoint(params, path)
    print(path)
    return 0


def cmd_defend(args):
    cfg = _load_config(args)
    train, _ = H.windows(cfg)
    names = [args.defense] if args.defense else [n for n in cfg.defenses if n not in ("none", "smoothing")]
    base = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out = _out(cfg)
    for name in names:
        params = H.defended_model(cfg, name, train, base)
        path = out / f"model_{name}.json"
        save_checkpoint(params, path)
        print(path)
    return 0


def _model(cfg, args, train):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    return H.train_model(cfg, train)


def cmd_attack(args):
    cfg = _load_config(args)
    dataset = H.load_dataset(cfg)
    train, ev = H.windows(cfg, dataset)
    cfg.validate(dataset.d)
    params = _model(cfg, args, train)
    ks = sorted(set(cfg.sweep))
    perts = []
    for w in ev:
        for ci, c1 in enumerate(cfg.c1):
            seed = H._window_seed(cfg, w, ci)
            for k, p in sorted(H.window_perturbations(params, w, cfg, ks, c1, seed).items()):
                perts.append(p.check())
    path = _out(cfg) / "perturbations.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(H.perturbations_to_json(perts))
    print(path)
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    train, ev = H.windows(cfg)
    params = _model(cfg, args, train)
    by_window = {}
    if args.perturbations:
        with open(args.perturbations, encoding="utf-8") as fh:
            for p in H.perturbations_from_json(fh.read()):
                by_window.setdefault(p.window_id, []).append(p.check())
    reports = {"no attack": MetricsReport(scope=cfg.scope)}
    for w in ev:
        seed = H._window_seed(cfg, w, 0)
        m = H.evaluate_window(params, w, np.zeros_like(w.x), cfg, seed)
        reports["no attack"].add(**{k: m[k] for k in H.METRICS})
        for p in by_window.get(w.window_id, []):
            label = f"k={p.spec.k},c1={p.spec.c1!r}"
            m = H.evaluate_window(params, w, p.delta, cfg, seed)
            reports.setdefault(label, MetricsReport(scope=cfg.scope)).add(**{k: m[k] for k in H.METRICS})
    _write_json(_out(cfg) / "metrics.json", {k: json.loads(r.to_json()) for k, r in reports.items()})
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    table = H.run_experiment(cfg, progress=lambda name, wid: log.info("%s window %d done", name, wid))
    for path in H.report(table, _out(cfg)):
        print(path)
    for (r, c), cell in table.cells.items():
        if cell.get("status") != "ok":
            print(f"cell ({r}, {c}) failed: {cell.get('diagnostic')}", file=sys.stderr)
    return 0 if table.complete() else 1


def cmd_report(args):
    cfg = _load_config(args)
    out = _out(cfg)
    src = Path(args.table) if args.table else out / "table.json"
    table = H.ResultTable.from_json(src.read_text(encoding="utf-8"))
    for path in H.report(table, out, formats=tuple(args.format)):
        print(path)
    return 0 if table.complete() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="mtsattack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config JSON (defaults built in when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(fn=fn)
        return sp

    add("train", cmd_train, "fit the forecaster and write model.json")
    sp = add("defend", cmd_defend, "train defended forecasters")
    sp.add_argument("--defense", choices=["augmentation", "minimax"])
    sp.add_argument("--checkpoint", help="clean model used as warm start")
    sp = add("attack", cmd_attack, "attack every evaluation window for each k in the sweep")
    sp.add_argument("--checkpoint")
    sp = add("evaluate", cmd_evaluate, "metrics for clean and (optionally) attacked histories")
    sp.add_argument("--checkpoint")
    sp.add_argument("--perturbations")
    add("sweep", cmd_sweep, "full table: defenses x sparsity levels")
    sp = add("report", cmd_report, "rewrite a saved table as JSON, CSV and TSV")
    sp.add_argument("--table")
    sp.add_argument("--format", nargs="+", default=["json", "csv", "tsv"], choices=["json", "csv", "tsv"])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (H.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
