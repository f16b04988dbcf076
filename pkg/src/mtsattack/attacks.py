"""Sparse indirect attacks on probabilistic multivariate forecasters.

Two attacks are provided:

* :func:`deterministic_attack` -- projected gradient descent on the expected
  squared distance between the attacked statistic and an adversarial target,
  inside an l-infinity ball, followed by a row-sparse projection.
* :func:`probabilistic_attack_train` -- learns a *sparse layer*, a per-row
  mixture of a Gaussian and a point mass at zero whose expected row sparsity
  is at most ``k``; perturbations are sampled from it.

Perturbations are relative: the attacked history is ``x * (1 + delta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from .diffkit import Graph, stack
from .models import draw_noise, rollout, sample_paths, PredictiveSamples, TrainingDivergedError
from .optim import Adam

log = logging.getLogger(__name__)

STATISTICS = ("point", "mean-h", "sum-i")


@dataclass(frozen=True)
class AttackSpec:
    """Targets ``I`` (0-based rows), horizons ``H`` (1-based offsets into the future)."""

    targets: tuple = (0,)
    horizons: tuple = (24,)
    k: int = 1
    eta: float = 0.5
    c1: float = 2.0
    iterations: int = 200
    step_size: float | None = None
    n_grad: int = 32
    ranking: str = "l2"
    statistic: str = "point"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(i) for i in self.targets))
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if not self.targets:
            raise ValueError("target set I must be nonempty")
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("horizon set H must be nonempty with offsets >= 1")
        if self.eta <= 0:
            raise ValueError("budget eta must be > 0")
        if self.c1 <= 0:
            raise ValueError("target scale c1 must be > 0")
        if self.ranking not in ("l1", "l2"):
            raise ValueError("ranking must be 'l1' or 'l2'")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if self.iterations < 0 or self.n_grad < 1:
            raise ValueError("iterations must be >= 0 and n_grad >= 1")

    @property
    def step(self):
        return self.eta / 8.0 if self.step_size is None else self.step_size

    def check(self, d, tau=None):
        """Full validity against a model with ``d`` series (and horizon ``tau``)."""
        if any(i < 0 or i >= d for i in self.targets):
            raise ValueError(f"target index out of range for d={d}")
        if not 1 <= self.k <= d - len(set(self.targets)):
            raise ValueError(f"sparsity k={self.k} outside [1, {d - len(set(self.targets))}]")
        if self.c1 == 1:
            raise ValueError("c1 = 1 is not an adversarial target")
        if tau is not None and max(self.horizons) > tau:
            raise ValueError(f"horizon offset {max(self.horizons)} exceeds model horizon {tau}")
        return self


@dataclass(frozen=True)
class Perturbation:
    """An attack matrix with its budget metadata.

    Deterministic perturbations always satisfy the hard row-sparsity bound;
    probabilistic ones only in expectation (``kind == "probabilistic"``).
    """

    delta: np.ndarray
    spec: AttackSpec | None = None
    seed: int | None = None
    window_id: int | None = None
    kind: str = "deterministic"
    sparsity: int = field(init=False)
    max_norm: float = field(init=False)

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.float64)
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "sparsity", row_sparsity(delta))
        object.__setattr__(self, "max_norm", float(np.max(np.abs(delta))) if delta.size else 0.0)

    def check(self):
        """Raise ``AssertionError`` if any perturbation invariant is violated."""
        if self.spec is None:
            return self
        s = self.spec
        assert self.max_norm <= s.eta + 1e-12, f"max-norm {self.max_norm} exceeds eta {s.eta}"
        assert not np.any(self.delta[list(s.targets)]), "target rows were perturbed"
        if self.kind == "deterministic":
            assert self.sparsity <= s.k, f"row sparsity {self.sparsity} exceeds k={s.k}"
        return self

    def to_dict(self):
        return {
            "window_id": self.window_id,
            "spec": None if self.spec is None else asdict(self.spec),
            "delta": self.delta.tolist(),
            "sparsity": self.sparsity,
            "max_norm": self.max_norm,
            "seed": self.seed,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, obj):
        spec = None if obj.get("spec") is None else AttackSpec(**obj["spec"])
        return cls(np.array(obj["delta"]), spec, obj.get("seed"), obj.get("window_id"), obj.get("kind", "deterministic"))


def row_sparsity(delta):
    delta = np.asarray(delta)
    return int(np.count_nonzero(np.any(delta != 0, axis=tuple(range(1, delta.ndim)))))


# --------------------------------------------------------------------------
# statistic and target


def _h_index(spec):
    return [h - 1 for h in spec.horizons]


def statistic(paths, spec):
    """chi(y) on arrays of shape (..., d, tau)."""
    sel = paths[..., list(spec.targets), :][..., _h_index(spec)]
    if spec.statistic == "mean-h":
        return sel.mean(axis=-1)
    if spec.statistic == "sum-i":
        return sel.sum(axis=-2)
    return sel


def adversarial_target(samples, spec, path_index=0):
    """``t = chi(c1 * y_hat)`` from one drawn clean path."""
    paths = samples.paths if isinstance(samples, PredictiveSamples) else np.asarray(samples)
    return spec.c1 * statistic(paths[path_index], spec)


def draw_target(params, x, spec, seed):
    clean = sample_paths(params, x, 1, seed=_sub_seed(seed, "target"))
    return adversarial_target(clean, spec)


def _sub_seed(seed, tag):
    tags = {"target": 1, "grad": 2, "eval": 3, "layer": 4, "smooth": 5}
    return [0 if seed is None else int(seed), tags[tag]]


# --------------------------------------------------------------------------
# loss


def _attacked_steps(params, g, x, delta_node, rng, n, smoothing=None, zero_noise=False):
    """Rollout of ``x * (1 + delta)``; smoothing jitters each path's history."""
    d, T = x.shape
    base = g.const(x[None]) * (1.0 + delta_node.reshape(-1, d, T))
    if smoothing is not None and smoothing.sigma > 0:
        # one independently jittered history per path
        xi = rng.standard_normal((n, d, T)) * smoothing.sigma
        base = base * g.const(1.0 + xi)
        eps = draw_noise(rng, params, n, 1)
    else:
        eps = draw_noise(rng, params, base.value.shape[0], n)
    if zero_noise:
        eps = np.zeros_like(eps)
    return rollout(params, base, eps)


def _loss_node(steps, spec, t):
    """Sum over (I, H) of the mean over paths of (chi(y) - t)^2."""
    g = steps[0].graph
    y = stack([steps[h - 1][:, :, list(spec.targets)] for h in spec.horizons], axis=-1)  # (B, n, |I|, |H|)
    if spec.statistic == "mean-h":
        y = y.mean(axis=-1)
    elif spec.statistic == "sum-i":
        y = y.sum(axis=-2)
    diff = y - g.const(np.asarray(t))
    return (diff * diff).sum(axis=tuple(range(2, diff.value.ndim))).mean()


def attack_loss_and_grad(params, x, delta, t, spec, seed=None, smoothing=None, zero_noise=False, rng=None):
    """Monte-Carlo attack loss at ``delta`` and its gradient w.r.t. ``delta``."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape:
        raise ValueError(f"delta shape {delta.shape} != history shape {x.shape}")
    rng = np.random.default_rng(seed) if rng is None else rng
    g = Graph()
    dn = g.leaf("delta", delta)
    steps = _attacked_steps(params, g, x, dn, rng, spec.n_grad, smoothing, zero_noise)
    loss = _loss_node(steps, spec, t)
    value = float(loss.value)
    if not math.isfinite(value):
        raise FloatingPointError("attack loss is not finite")
    return value, g.backward(loss)["delta"]


def attack_loss(params, x, delta, t, spec, seed=None, smoothing=None, zero_noise=False):
    return attack_loss_and_grad(params, x, delta, t, spec, seed, smoothing, zero_noise)[0]


# --------------------------------------------------------------------------
# projections


def clip(delta, eta):
    """Elementwise ``delta * min(1, eta / |delta|)``: projection onto the max-norm ball."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    return np.clip(np.asarray(delta, dtype=np.float64), -eta, eta)


def pgd_step(delta, grad, step_size, eta):
    delta = np.asarray(delta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if delta.shape != grad.shape:
        raise ValueError(f"shape mismatch: delta {delta.shape}, grad {grad.shape}")
    return clip(delta - step_size * grad, eta)


def row_scores(delta, ranking="l2"):
    delta = np.asarray(delta, dtype=np.float64)
    if ranking == "l1":
        return np.abs(delta).sum(axis=1)
    return (delta * delta).sum(axis=1)


def sparsify_topk(delta, k, targets=(), ranking="l2", spec=None, seed=None, window_id=None):
    """Keep the ``k`` highest-scoring rows outside ``targets``; zero everything else.

    With the default squared-l2 ranking this is the exact Frobenius-nearest
    point with at most ``k`` nonzero rows and zero target rows.  Ties go to
    the lower row index.
    """
    delta = np.asarray(delta, dtype=np.float64)
    d = delta.shape[0]
    targets = sorted(set(int(i) for i in targets))
    free = [i for i in range(d) if i not in targets]
    if not 0 <= k <= len(free):
        raise ValueError(f"k={k} outside [0, {len(free)}]")
    score = row_scores(delta, ranking)[free]
    order = np.argsort(-score, kind="stable")
    keep = [free[j] for j in order[:k]]
    out = np.zeros_like(delta)
    out[keep] = delta[keep]
    return Perturbation(out, spec, seed, window_id)


# --------------------------------------------------------------------------
# deterministic attack


def pgd_dense(params, x, spec, seed=None, smoothing=None, t=None):
    """Steps 1-6: returns (dense delta*, target t, loss trace).

    The target rows are held at zero throughout (projection onto the feasible
    subspace), so sparsification never discards work spent on them.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    spec.check(d, params.horizon)
    if t is None:
        t = draw_target(params, x, spec, seed)
    delta = np.zeros_like(x)
    free = np.ones((d, 1))
    free[list(spec.targets)] = 0.0
    rng = np.random.default_rng(_sub_seed(seed, "grad"))
    trace = []
    for _ in range(spec.iterations):
        value, grad = attack_loss_and_grad(params, x, delta, t, spec, smoothing=smoothing, rng=rng)
        trace.append(value)
        grad = grad * free
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0:
            break
        delta = pgd_step(delta, grad / gmax, spec.step, spec.eta)
    return delta, t, trace


def deterministic_attack(params, window, spec, seed=None, smoothing=None):
    """Sparse indirect attack: PGD in the max-norm ball, then top-k row projection."""
    x = window.x if hasattr(window, "x") else np.asarray(window)
    wid = getattr(window, "window_id", None)
    dense, _, _ = pgd_dense(params, x, spec, seed, smoothing)
    return sparsify_topk(dense, spec.k, spec.targets, spec.ranking, spec, seed, wid).check()


# --------------------------------------------------------------------------
# sparse layer


@dataclass(frozen=True)
class SparseLayerParams:
    """Perturbation generator.

    Row ``i`` of a draw is ``clip(mu_i(x) + sd_i * z, eta)`` with probability
    ``r_i(gamma)`` and exactly zero otherwise, where
    ``mu_i(x) = eta * tanh(mu_bias_i + mu_gain_i * (x_i / scale_i - 1))``.
    """

    mu_bias: np.ndarray
    mu_gain: np.ndarray
    sd_raw: np.ndarray
    log_gamma: np.ndarray
    scale: np.ndarray
    eta: float = 0.5

    @property
    def gamma(self):
        return np.exp(self.log_gamma)

    @property
    def d(self):
        return self.mu_bias.shape[0]

    def arrays(self):
        return {"mu_bias": self.mu_bias, "mu_gain": self.mu_gain, "sd_raw": self.sd_raw, "log_gamma": self.log_gamma}

    def with_arrays(self, arrays):
        return replace(self, **arrays)

    def to_dict(self):
        out = {k: np.asarray(v).tolist() for k, v in self.arrays().items()}
        out.update(scale=self.scale.tolist(), eta=self.eta)
        return out


def init_sparse_layer(d, T, scale=None, eta=0.5, sd=0.1, seed=None):
    rng = np.random.default_rng(seed)
    return SparseLayerParams(
        mu_bias=rng.normal(0.0, 0.01, (d, T)),
        mu_gain=np.zeros((d, T)),
        sd_raw=np.full(d, float(np.log(np.expm1(sd)))),
        log_gamma=np.zeros(d),
        scale=np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64),
        eta=eta,
    )


def _check_gamma(gamma):
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0) or not np.all(np.isfinite(gamma)):
        raise ValueError("gate weights gamma must be strictly positive")
    return gamma


def gate_probs(gamma, k, d=None):
    """``r_i = k sqrt(gamma_i) / (sqrt(d) sqrt(sum gamma))`` clamped to [0, 1]."""
    gamma = _check_gamma(gamma)
    d = gamma.shape[0] if d is None else d
    r = k * np.sqrt(gamma) / (math.sqrt(d) * math.sqrt(gamma.sum()))
    return np.clip(r, 0.0, 1.0)


def expected_sparsity(gamma, k, d=None):
    return float(np.sum(np.minimum(1.0, gate_probs(gamma, k, d))))


def _layer_mean_sd(theta, x):
    rel = np.asarray(x, dtype=np.float64) / theta.scale[:, None] - 1.0
    mu = theta.eta * np.tanh(theta.mu_bias + theta.mu_gain * rel)
    sd = theta.eta * np.logaddexp(0.0, theta.sd_raw)
    return mu, sd


def sparse_layer_sample(theta, x, k, seed=None, targets=None, rng=None):
    """One draw ``(delta, mask)``; ``mask_i = 1{u_i <= Phi^-1(r_i(gamma))}``."""
    rng = np.random.default_rng(seed) if rng is None else rng
    r = gate_probs(theta.gamma, k)
    mu, sd = _layer_mean_sd(theta, x)
    d, T = mu.shape
    z = rng.standard_normal((d, T))
    u = rng.standard_normal(d)
    with np.errstate(divide="ignore"):
        mask = (u <= special.ndtri(r)).astype(np.float64)
    dense = mu + sd[:, None] * z
    delta = np.clip(dense, -theta.eta, theta.eta) * mask[:, None]
    if targets:
        delta[list(targets)] = 0.0
        mask[list(targets)] = 0.0
    return delta, mask


def sparse_layer_draws(theta, x, k, m, rng, targets=None, return_masks=False):
    """``m`` independent draws stacked to (m, d, T), vectorized over draws."""
    r = gate_probs(theta.gamma, k)
    mu, sd = _layer_mean_sd(theta, x)
    d, T = mu.shape
    z = rng.standard_normal((m, d, T))
    u = rng.standard_normal((m, d))
    with np.errstate(divide="ignore"):
        masks = (u <= special.ndtri(r)).astype(np.float64)
    if targets:
        masks[:, list(targets)] = 0.0
    deltas = np.clip(mu + sd[:, None] * z, -theta.eta, theta.eta) * masks[:, :, None]
    return (deltas, masks) if return_masks else deltas


def sparse_layer_node(g, leaves, theta, x, k, z, u, temperature, targets=None):
    """Differentiable relaxed draw(s): ``x`` (B, d, T), ``z`` (B, m, d, T), ``u`` (B, m, d).

    Returns delta of shape (B, m, d, T).  The indicator is replaced by
    ``sigmoid((Phi^-1(r) - u) / temperature)``.
    """
    d = theta.d
    rel = g.const(np.asarray(x) / theta.scale[:, None] - 1.0)  # (B, d, T)
    pre = leaves["mu_bias"] + leaves["mu_gain"] * rel
    mu = pre.tanh() * theta.eta  # (B, d, T)
    B, _, T = mu.value.shape
    sd = leaves["sd_raw"].softplus() * theta.eta
    dense = mu.reshape(B, 1, d, T) + sd.reshape(1, 1, d, 1) * g.const(z)
    dense = dense.clip(-theta.eta, theta.eta)
    gamma = leaves["log_gamma"].exp()
    r = gamma.sqrt() * (k / math.sqrt(d)) / gamma.sum().sqrt()
    r = r.clip(1e-6, 1.0 - 1e-6)
    gate = ((r.ndtri() - g.const(u)) * (1.0 / temperature)).sigmoid()  # (B, m, d)
    if targets:
        keep = np.ones(d)
        keep[list(targets)] = 0.0
        gate = gate * g.const(keep)
    return dense * gate.reshape(B, gate.value.shape[1], d, 1)


@dataclass
class ProbAttackConfig:
    steps: int = 100
    lr: float = 0.05
    draws: int = 8
    inner_paths: int = 4
    temperature: float = 0.1
    init_sd: float = 0.1


def _sparse_objective_node(params, g, leaves, theta, x, spec, t, rng, cfg, smoothing=None):
    d, T = x.shape
    m, n = cfg.draws, cfg.inner_paths
    z = rng.standard_normal((1, m, d, T))
    u = rng.standard_normal((1, m, d))
    delta = sparse_layer_node(g, leaves, theta, x[None], spec.k, z, u, cfg.temperature, spec.targets)
    delta = delta.reshape(m, d, T)
    base = g.const(x[None]) * (1.0 + delta)
    if smoothing is not None and smoothing.sigma > 0:
        base = base * g.const(1.0 + rng.standard_normal((m, d, T)) * smoothing.sigma)
    eps = draw_noise(rng, params, m, n)
    steps = rollout(params, base, eps)
    sel = stack([steps[h - 1][:, :, list(spec.targets)] for h in spec.horizons], axis=-1)  # (m, n, |I|, |H|)
    if spec.statistic == "mean-h":
        sel = sel.mean(axis=-1)
    elif spec.statistic == "sum-i":
        sel = sel.sum(axis=-2)
    inner = sel.mean(axis=1)  # expectation over y for each delta
    diff = inner - g.const(np.asarray(t))
    return (diff * diff).sum(axis=tuple(range(1, diff.value.ndim))).mean()


def probabilistic_attack_train(params, window, spec, config=None, seed=None, smoothing=None, t=None, trace=None):
    """Fit a sparse layer minimizing E_delta || E_y[chi(y)] - t ||^2 by Adam."""
    config = config or ProbAttackConfig()
    x = window.x if hasattr(window, "x") else np.asarray(window)
    d, T = x.shape
    spec.check(d, params.horizon)
    if t is None:
        t = draw_target(params, x, spec, seed)
    theta = init_sparse_layer(d, T, params.scale, spec.eta, config.init_sd, seed=_sub_seed(seed, "layer"))
    rng = np.random.default_rng(_sub_seed(seed, "grad"))
    arrays = theta.arrays()
    opt = Adam(arrays, lr=config.lr, clip_norm=10.0)
    for step in range(config.steps):
        g = Graph()
        leaves = {k: g.leaf(k, v) for k, v in arrays.items()}
        try:
            obj = _sparse_objective_node(params, g, leaves, theta.with_arrays(arrays), x, spec, t, rng, config, smoothing)
            grads = g.backward(obj)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"sparse-layer objective diverged at step {step}: {exc}") from exc
        if trace is not None:
            trace.append(float(obj.value))
        arrays = opt.step(arrays, grads)
    return theta.with_arrays(arrays)


def sparse_attack_objective(params, window, theta, spec, t, n=1000, seed=None, inner_paths=8, smoothing=None):
    """Monte-Carlo value of the sparse-layer objective with hard masks."""
    x = window.x if hasattr(window, "x") else np.asarray(window)
    rng = np.random.default_rng(seed)
    deltas = sparse_layer_draws(theta, x, spec.k, n, rng, spec.targets)
    total = 0.0
    chunk = 250
    for s in range(0, n, chunk):
        dl = deltas[s: s + chunk]
        g = Graph()
        base = g.const(x[None] * (1.0 + dl))
        if smoothing is not None and smoothing.sigma > 0:
            base = base * g.const(1.0 + rng.standard_normal(dl.shape) * smoothing.sigma)
        steps = rollout(params, base, draw_noise(rng, params, dl.shape[0], inner_paths))
        paths = np.stack([st.value for st in steps], axis=-1)  # (m, n, d, tau)
        inner = statistic(paths, spec).mean(axis=1)
        total += float(np.sum((inner - np.asarray(t)) ** 2))
    return total / n


def probabilistic_attack(theta, window, spec, seed=None):
    """Hard-mask draw from a trained sparse layer, as a :class:`Perturbation`."""
    x = window.x if hasattr(window, "x") else np.asarray(window)
    delta, _ = sparse_layer_sample(theta, x, spec.k, seed=_sub_seed(seed, "eval"), targets=spec.targets)
    return Perturbation(delta, spec, seed, getattr(window, "window_id", None), kind="probabilistic").check()
