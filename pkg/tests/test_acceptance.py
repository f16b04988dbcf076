"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The benchmark is the seeded synthetic coupled VAR (d=10, T=96, tau=24) with
the linear-VAR forecaster, target series 0 and horizon tau.  The full table
is computed once per module and shared by the trend and defense criteria.
"""

import itertools
import json
import time

import numpy as np
import pytest

from mtsattack import cli, harness as H
from mtsattack.attacks import (
    AttackSpec,
    attack_loss_and_grad,
    gate_probs,
    init_sparse_layer,
    sparse_layer_draws,
    sparsify_topk,
)
from mtsattack.metrics import ALPHAS, QuantileForecast, avg_wql, wape_wse, wql
from mtsattack.models import companion, predictive_mean_closed_form

from test_diffkit import BUILDERS, _check_op
from test_metrics import reference_wql

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    cfg = H.ExperimentConfig()
    table = H.run_experiment(cfg)
    return cfg, table, time.perf_counter() - t0


# --------------------------------------------------------------------------
# 1. gradient integrity


def _closed_form_attack_grad(params, x, delta, t, spec):
    """2 (m - t) dm/d delta with m the exact mean and the Jacobian read off C^h."""
    d, _ = x.shape
    p = params.order
    s = params.scale
    xa = x * (1.0 + delta)
    Ch = np.linalg.matrix_power(companion(params), max(spec.horizons))
    grad = np.zeros_like(x)
    for n_i, i in enumerate(spec.targets):
        m = predictive_mean_closed_form(params, xa, spec.horizons[0])[i]
        for lag in range(p):
            col = x.shape[1] - 1 - lag
            dm_dx = s[i] * Ch[i, lag * d:(lag + 1) * d] / s
            grad[:, col] += 2.0 * (m - t[n_i, 0]) * dm_dx * x[:, col]
    return grad


def test_criterion_1_gradient_integrity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_op = 0.0
    for op in sorted(BUILDERS):
        for _ in range(100):
            worst_op = max(worst_op, _check_op(op, rng))

    cfg = H.ExperimentConfig()
    ds = H.load_dataset(cfg)
    train, ev = H.windows(cfg, ds)
    params = H.train_model(cfg, train)
    w = ev[0]
    spec = AttackSpec(k=9, targets=(0,), horizons=(24,), eta=0.5, n_grad=10_000)
    delta = np.random.default_rng(1).uniform(-0.5, 0.5, w.x.shape)
    delta[0] = 0.0
    m = predictive_mean_closed_form(params, w.x * (1 + delta), 24)[0]
    t = np.array([[m + 50.0 * params.scale[0]]])  # far target: MC error of the mean is negligible
    _, mc = attack_loss_and_grad(params, w.x, delta, t, spec, seed=0)
    exact = _closed_form_attack_grad(params, w.x, delta, t, spec)
    chain_err = float(np.max(np.abs(mc - exact)) / np.max(np.abs(exact)))
    elapsed = time.perf_counter() - t0

    ok = worst_op <= 1e-5 and chain_err <= 1e-3 and elapsed <= 60
    verdict(1, "gradient integrity", ok,
            f"ops x100 worst rel err {worst_op:.1e}, attack-gradient rel err {chain_err:.1e}, {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. top-k projection oracle


def _brute_force(delta, k, targets):
    d = delta.shape[0]
    free = [i for i in range(d) if i not in targets]
    best = np.inf
    for size in range(min(k, len(free)) + 1):
        for keep in itertools.combinations(free, size):
            proj = np.zeros_like(delta)
            proj[list(keep)] = delta[list(keep)]
            best = min(best, float(np.linalg.norm(proj - delta)))
    return best


def test_criterion_2_topk_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    cases = 0
    for d in range(1, 9):
        for k in range(0, d + 1):
            for _ in range(200):
                delta = rng.normal(size=(d, 5)) * rng.uniform(0.1, 3.0, (d, 1))
                p = sparsify_topk(delta, k)
                worst = max(worst, abs(float(np.linalg.norm(p.delta - delta)) - _brute_force(delta, k, ())))
                cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed <= 60
    verdict(2, "top-k projection oracle", ok, f"{cases} cases, worst distance gap {worst:.1e}, {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. sparse-layer gate and expected sparsity


def test_criterion_3_sparse_layer_gate(verdict):
    t0 = time.perf_counter()
    n = 100_000
    d, T = 6, 3
    x = np.ones((d, T))
    rng = np.random.default_rng(11)
    theta0 = init_sparse_layer(d, T, seed=0)

    def draws(gamma, k):
        theta = theta0.with_arrays({"log_gamma": np.log(gamma)})
        deltas = sparse_layer_draws(theta, x, k, n, rng)
        zero = ~np.any(deltas != 0, axis=2)  # (n, d)
        return zero, (~zero).sum(axis=1)

    # P(row i is zero) = 1 - r_i
    worst_z = 0.0
    for k in (1, 2, 3, 5):
        gamma = np.exp(rng.normal(0.0, 1.0, d))
        r = gate_probs(gamma, k)
        zero, _ = draws(gamma, k)
        se = np.sqrt(np.maximum(r * (1 - r), 1e-300) / n)
        z = np.abs(zero.mean(axis=0) - (1 - r)) / se
        z[r == 1.0] = 0.0 if np.all(~zero[:, r == 1.0]) else np.inf
        worst_z = max(worst_z, float(z.max()))
    ok_gate = worst_z <= 3.0

    # E[s] <= k for random positive gamma
    worst_excess = -np.inf
    for _ in range(50):
        k = int(rng.integers(1, d + 1))
        gamma = np.exp(rng.normal(0.0, 1.5, d))
        _, s = draws(gamma, k)
        excess = (s.mean() - k) / (s.std(ddof=1) / np.sqrt(n))
        worst_excess = max(worst_excess, float(excess))
    ok_bound = worst_excess <= 3.0

    # E[s] = k for uniform gamma
    worst_uniform = 0.0
    for k in range(1, d + 1):
        _, s = draws(np.ones(d), k)
        se = max(s.std(ddof=1), 1e-300) / np.sqrt(n)
        worst_uniform = max(worst_uniform, abs(s.mean() - k) / se if s.std() > 0 else abs(s.mean() - k))
    ok_uniform = worst_uniform <= 3.0
    elapsed = time.perf_counter() - t0

    ok = ok_gate and ok_bound and ok_uniform and elapsed <= 120
    verdict(3, "sparse-layer gate and sparsity", ok,
            f"gate worst |z| {worst_z:.2f}, max (E[s]-k)/SE {worst_excess:.2f} over 50 gammas, "
            f"uniform worst |z| {worst_uniform:.2f}, {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 4. indirect attack trend


def _paired_std(table, a, b, column="none"):
    va = np.asarray(table.cell(a, column)["avg_wql"]["values"])
    vb = np.asarray(table.cell(b, column)["avg_wql"]["values"])
    return float(np.std(vb - va))


def test_criterion_4_indirect_attack_trend(benchmark, verdict):
    cfg, table, elapsed = benchmark
    means = [table.mean(f"k={k}", "none") for k in cfg.sweep]
    clean = table.mean(H.NO_ATTACK, "none")
    ratio = table.mean("k=5", "none") / clean
    inversions = 0
    within = True
    for (k0, m0), (k1, m1) in zip(zip(cfg.sweep, means), zip(cfg.sweep[1:], means[1:])):
        if m1 < m0:
            inversions += 1
            within &= (m0 - m1) <= _paired_std(table, f"k={k0}", f"k={k1}")
    untouched = all(table.cell(r, c)["diagnostics"]["max_target_row_abs"] == 0.0
                    for r in table.rows[1:] for c in table.columns)
    ok = table.complete() and ratio >= 1.5 and inversions <= 1 and within and untouched and elapsed <= 600
    trend = " ".join(f"{m:.3f}" for m in means)
    verdict(4, "indirect attack trend", ok,
            f"no attack {clean:.3f}, k=1..9 {trend}, k=5 ratio {ratio:.1f}x, {inversions} inversions, "
            f"target row zero: {untouched}, table {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 5. probabilistic vs deterministic


def test_criterion_5_probabilistic_vs_deterministic(benchmark, verdict):
    cfg, table, _ = benchmark
    t0 = time.perf_counter()
    pcfg = H.ExperimentConfig(sweep=[5], full_attack=False, defenses={"none": {}}, attack_kind="probabilistic")
    prob = H.run_experiment(pcfg)
    elapsed = time.perf_counter() - t0
    det_v = np.asarray(table.cell("k=5", "none")["avg_wql"]["values"])
    prob_v = np.asarray(prob.cell("k=5", "none")["avg_wql"]["values"])
    gap = float(prob_v.mean() - det_v.mean())
    paired = float(np.std(prob_v - det_v))
    trend = gap >= -paired
    ok = prob.complete() and elapsed <= 900
    detail = f"probabilistic {prob_v.mean():.3f} vs deterministic {det_v.mean():.3f}, paired std {paired:.3f}"
    detail += ", trend holds" if trend else ", DEVIATION: probabilistic weaker beyond paired std"
    verdict(5, "probabilistic vs deterministic", ok and trend, f"{detail}, {elapsed:.0f}s")
    # trend-level criterion: a reported deviation is an allowed outcome, a broken run is not
    assert ok


# --------------------------------------------------------------------------
# 6. defense efficacy


def test_criterion_6_defense_efficacy(benchmark, verdict):
    _, table, elapsed = benchmark
    m = lambda r, c: table.mean(r, c)  # noqa: E731
    smooth = {k: (m(f"k={k}", "smoothing"), m(f"k={k}", "none")) for k in (1, 3)}
    minimax = {k: (m(f"k={k}", "minimax"), m(f"k={k}", "none")) for k in (7, 9)}
    ok = all(a < b for a, b in smooth.values()) and all(a < b for a, b in minimax.values()) and elapsed <= 1200
    detail = ", ".join([f"smoothing k={k} {a:.3f} < {b:.3f}" for k, (a, b) in smooth.items()]
                       + [f"minimax k={k} {a:.3f} < {b:.3f}" for k, (a, b) in minimax.items()])
    verdict(6, "defense efficacy", ok, detail)
    assert ok


# --------------------------------------------------------------------------
# 7. metric exactness


def test_criterion_7_metric_exactness(verdict):
    pt = lambda v: np.array([[float(v)]])  # noqa: E731
    checks = [
        wql(pt(10), pt(10), 0.3) == 0.0,
        abs(wql(pt(10), pt(8), 0.5) - 0.2) <= 1e-12,
        abs(wql(pt(10), pt(12), 0.9) - 0.04) <= 1e-12,
        avg_wql(pt(10), QuantileForecast(np.full((9, 1, 1), 10.0), ALPHAS, 100)) == 0.0,
        abs(avg_wql(pt(10), QuantileForecast(np.full((9, 1, 1), 8.0), ALPHAS, 100)) - 0.2) <= 1e-12,
        abs(avg_wql(pt(10), QuantileForecast(np.full((9, 1, 1), 12.0), ALPHAS, 100)) - 0.2) <= 1e-12,
        all(abs(a - b) <= 1e-12 for a, b in zip(wape_wse(pt(10), np.full((4, 1, 1), 8.0), (0,), (1,)), (0.2, 0.04))),
        wape_wse(pt(10), np.full((3, 1, 1), 10.0), (0,), (1,)) == (0.0, 0.0),
    ]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, 2))
        x = rng.normal(0, 3, shape)
        q = rng.normal(0, 3, shape)
        a = float(rng.uniform(0.01, 0.99))
        worst = max(worst, abs(wql(x, q, a) - reference_wql(x, q, a)))
    ok = all(checks) and worst <= 1e-12
    verdict(7, "metric exactness", ok, f"{sum(checks)}/{len(checks)} worked examples, pinball worst gap {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_sweep_determinism(tmp_path, monkeypatch, verdict):
    monkeypatch.delenv(H.OUTPUT_ENV, raising=False)
    cfg = H.ExperimentConfig(n_eval=4, eval_paths=50,
                             attack={"targets": [0], "horizons": [24], "eta": 0.5, "iterations": 10, "n_grad": 8},
                             defenses={"none": {}, "augmentation": {"sigma": 0.1},
                                       "smoothing": {"sigma": 0.1, "n": 50, "attack_paths": 8},
                                       "minimax": {"epochs": 20, "batch_windows": 16}})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    outputs = []
    for run in ("a", "b"):
        # identical config file; only the output location differs, via the environment
        monkeypatch.setenv(H.OUTPUT_ENV, str(tmp_path / run))
        assert cli.main(["sweep", "--config", str(path), "--seed", "3"]) == 0
        outputs.append((tmp_path / run / "table.json").read_bytes())
    same = outputs[0] == outputs[1]
    verdict(8, "sweep determinism", same, f"{len(outputs[0])} bytes, identical: {same}")
    assert same
