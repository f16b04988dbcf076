"""Probabilistic multivariate forecasters with reparameterized sampling.

Two model kinds share one interface:

``linear-var``
    Gaussian VAR(p) with an intercept and diagonal noise.  Used as the
    closed-form oracle for gradient and sampling checks.

``recurrent-lowrank``
    A small DeepVAR-style model: a GRU over the (scaled) multivariate
    history, a mean head with a linear skip from the previous observation,
    a diagonal scale head driven by the hidden state and an unconditional
    rank-r factor ``V``.  One-step covariance is ``diag(sd**2) + V V^T``.

All computation is done on per-item mean-scaled values; ``scale`` maps back
to data units.  Every sample is ``mean + sd * e1 + V e2`` with parameter-free
normals ``e1 ~ N(0, I_d)``, ``e2 ~ N(0, I_r)`` so gradients flow from sampled
paths back to the input history.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffkit import Graph, Node, concat, stack
from .optim import Adam

log = logging.getLogger(__name__)

LINEAR_VAR = "linear-var"
RECURRENT = "recurrent-lowrank"
MODEL_KINDS = (LINEAR_VAR, RECURRENT)
SD_FLOOR = 1e-4
CHECKPOINT_SCHEMA = 1


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class Window:
    """One forecasting instance: history ``x`` (d x T) and future ``y_true`` (d x tau)."""

    x: np.ndarray
    y_true: np.ndarray
    item_ids: tuple = ()
    timestamps: tuple = ()
    window_id: int = 0
    start: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y_true, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"window shapes disagree: x {x.shape}, y {y.shape}")
        if y.shape[1] < 1:
            raise ValueError("window needs at least one future step")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("window contains missing or non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y_true", y)

    @property
    def d(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[1]

    @property
    def tau(self):
        return self.y_true.shape[1]


@dataclass(frozen=True)
class PredictiveSamples:
    """``paths`` has shape (n, d, tau)."""

    paths: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] < 1:
            raise ValueError(f"paths must be (n, d, tau) with n >= 1, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite sample paths")
        object.__setattr__(self, "paths", p)

    @property
    def n(self):
        return self.paths.shape[0]

    def mean(self):
        return self.paths.mean(axis=0)


@dataclass(frozen=True)
class ForecasterParams:
    kind: str
    arrays: dict
    config: dict
    scale: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        arrays = {k: np.array(v, dtype=np.float64) for k, v in self.arrays.items()}
        for a in arrays.values():
            a.setflags(write=False)
        scale = np.array(self.scale, dtype=np.float64)
        scale.setflags(write=False)
        object.__setattr__(self, "arrays", arrays)
        object.__setattr__(self, "scale", scale)
        if self.kind == LINEAR_VAR and self.order < 1:
            raise ValueError("VAR order must be >= 1")
        if self.rank > self.d:
            raise ValueError("low-rank factor rank must not exceed d")

    @property
    def d(self):
        return int(self.config["d"])

    @property
    def horizon(self):
        return int(self.config["horizon"])

    @property
    def order(self):
        return int(self.config.get("order", 1))

    @property
    def rank(self):
        return int(self.config.get("rank", 0))

    def with_arrays(self, arrays):
        return replace(self, arrays=arrays)


@dataclass
class FitConfig:
    """Training hyper-parameters (free choices; none are given for the attacked model)."""

    kind: str = RECURRENT
    horizon: int = 24
    order: int = 1
    hidden: int = 32
    rank: int = 5
    epochs: int = 300
    lr: float = 1e-2
    clip_norm: float = 10.0
    seed: int = 0
    method: str = "auto"  # linear-var: "ols" when auto; recurrent always "adam"
    nll_tolerance: float = 0.05


# --------------------------------------------------------------------------
# parameter construction


def init_params(kind, d, horizon, scale=None, *, order=1, hidden=32, rank=5, seed=0):
    rng = np.random.default_rng(seed)
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64)
    if kind == LINEAR_VAR:
        arrays = {
            "coef": np.zeros((order, d, d)),
            "bias": np.zeros(d),
            "sd_raw": np.full(d, _softplus_inv(0.1)),
        }
        config = {"d": d, "horizon": horizon, "order": order, "rank": 0}
    elif kind == RECURRENT:
        if rank > d:
            raise ValueError("rank must not exceed d")
        H = hidden
        s_in = 1.0 / math.sqrt(d)
        s_h = 1.0 / math.sqrt(H)
        arrays = {
            "W_in": rng.normal(0.0, s_in, (d, 3 * H)),
            "W_h": rng.normal(0.0, s_h, (H, 3 * H)),
            "b_gru": np.zeros(3 * H),
            "W_mu": rng.normal(0.0, 0.1 * s_h, (H, d)),
            "b_mu": np.zeros(d),
            "W_skip": np.zeros((d, d)),
            "W_sd": rng.normal(0.0, 0.1 * s_h, (H, d)),
            "b_sd": np.full(d, _softplus_inv(0.1)),
            "V": rng.normal(0.0, 0.01, (d, rank)),
        }
        config = {"d": d, "horizon": horizon, "hidden": H, "rank": rank}
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return ForecasterParams(kind, arrays, config, scale)


def linear_var_params(coef, noise_sd, horizon, bias=None, scale=None):
    """Build a ``linear-var`` model from coefficient matrices ``A_1..A_p``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 2:
        coef = coef[None]
    p, d, _ = coef.shape
    noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=np.float64), (d,))
    if np.any(noise_sd <= 0):
        raise ValueError("noise scales must be strictly positive")
    arrays = {
        "coef": coef,
        "bias": np.zeros(d) if bias is None else np.asarray(bias, dtype=np.float64),
        "sd_raw": _softplus_inv(noise_sd),
    }
    config = {"d": d, "horizon": horizon, "order": p, "rank": 0}
    return ForecasterParams(LINEAR_VAR, arrays, config, np.ones(d) if scale is None else scale)


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _softplus(z):
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0.0))))


# --------------------------------------------------------------------------
# likelihood


def lowrank_logpdf(y, mean, diag, V=None):
    """Gaussian log-density with covariance ``diag(diag) + V V^T`` on graph nodes.

    ``y``, ``mean``, ``diag`` broadcast to (..., d); ``V`` is (d, r) or
    (..., d, r).  Uses the matrix-inversion and determinant lemmas so only an
    r x r system is inverted.  Returns a node of shape (...).
    """
    g = y.graph
    e = y - mean
    dinv = 1.0 / diag
    quad = (e * e * dinv).sum(axis=-1)
    logdet = diag.log().sum(axis=-1)
    d = _last_dim(e, mean, diag)
    if V is not None and V.value.shape[-1] > 0:
        r = V.value.shape[-1]
        Vt = V.swapaxes(-1, -2)
        dinv_row = _expand(dinv, -2)  # (..., 1, d)
        VtD = Vt * dinv_row  # (..., r, d)
        cap = g.const(np.eye(r)) + VtD @ V
        w = VtD @ _expand(e, -1)  # (..., r, 1)
        corr = (w * (cap.inv() @ w)).sum(axis=(-2, -1))
        quad = quad - corr
        logdet = logdet + cap.logdet()
    return -0.5 * (quad + logdet + d * math.log(2.0 * math.pi))


def _last_dim(*nodes):
    return max(n.value.shape[-1] for n in nodes)


def _expand(node, axis):
    shape = list(node.value.shape)
    if axis < 0:
        axis = len(shape) + 1 + axis
    shape.insert(axis, 1)
    return node.reshape(shape)


def log_likelihood(y, mean, diag, V=None, params=None):
    """Log-density of ``y`` under N(mean, diag(diag) + V V^T) (plain arrays in, float out)."""
    diag = np.asarray(diag, dtype=np.float64)
    if np.any(diag <= 0):
        raise ValueError("diagonal covariance entries must be strictly positive")
    g = Graph()
    Vn = None if V is None else g.const(np.asarray(V, dtype=np.float64))
    out = lowrank_logpdf(g.const(y), g.const(mean), g.const(diag), Vn)
    return float(out.value)


# --------------------------------------------------------------------------
# differentiable rollout


def _leaves(g, params, trainable=False):
    return {k: (g.leaf(k, v) if trainable else g.const(v)) for k, v in params.arrays.items()}


def noise_dim(params):
    return params.d + params.rank


def draw_noise(rng, params, batch, n, horizon=None):
    horizon = params.horizon if horizon is None else horizon
    return rng.standard_normal((batch, n, horizon, noise_dim(params)))


def rollout(params, x, eps, leaves=None):
    """Free-running sample rollout.

    ``x`` is a node of shape (B, d, T) in data units.  ``eps`` is an array of
    shape (B, n, tau, d + r).  Returns ``tau`` nodes of shape (B, n, d), in
    data units, each a differentiable function of ``x`` and the parameters.
    """
    g = x.graph
    P = _leaves(g, params) if leaves is None else leaves
    B, d, T = x.value.shape
    _, n, tau, _ = eps.shape
    scale = params.scale
    xs = x * g.const((1.0 / scale)[:, None])
    if params.kind == LINEAR_VAR:
        steps = _rollout_var(g, params, P, xs, eps, B, n, tau)
    else:
        steps = _rollout_gru(g, params, P, xs, eps, B, n, tau)
    sc = g.const(scale)
    return [s * sc for s in steps]


def _emit(g, P, params, mean, sd, eps_t):
    d = params.d
    out = mean + sd * g.const(eps_t[..., :d])
    if params.rank > 0:
        out = out + g.const(eps_t[..., d:]) @ P["V"].swapaxes(0, 1)
    return out


def _var_weight(P, params):
    p, d = params.order, params.d
    # stacked lags [x_{t-1}, ..., x_{t-p}] @ W  with W = [A_1^T; ...; A_p^T]
    return P["coef"].transpose(0, 2, 1).reshape(p * d, d)


def _rollout_var(g, params, P, xs, eps, B, n, tau):
    p, d = params.order, params.d
    T = xs.value.shape[2]
    if T < p:
        raise ValueError(f"history length {T} shorter than VAR order {p}")
    W = _var_weight(P, params)
    sd = P["sd_raw"].softplus()
    lags = [xs[:, :, T - 1 - l].reshape(B, 1, d).broadcast_to((B, n, d)) for l in range(p)]
    steps = []
    for h in range(tau):
        z = lags[0] if p == 1 else concat(lags, axis=-1)
        mean = z @ W + P["bias"]
        y = _emit(g, P, params, mean, sd, eps[:, :, h, :])
        steps.append(y)
        lags = [y] + lags[:-1]
    return steps


def _gru_inputs(g, P, xs_seq):
    # xs_seq: (B, L, d) -> (B, L, 3H) input projections with bias folded in
    return xs_seq @ P["W_in"] + P["b_gru"]


def _gru_step(P, H, gx, h):
    gh = h @ P["W_h"]
    zr = (gx[..., : 2 * H] + gh[..., : 2 * H]).sigmoid()
    z = zr[..., :H]
    r = zr[..., H:]
    cand = (gx[..., 2 * H:] + r * gh[..., 2 * H:]).tanh()
    return cand + z * (h - cand)


def _encode(g, params, P, xs_seq):
    """Run the GRU over (B, L, d); returns list of hidden states after each input."""
    H = int(params.config["hidden"])
    B, L, _ = xs_seq.value.shape
    GX = _gru_inputs(g, P, xs_seq)
    h = g.const(np.zeros((B, H)))
    hs = []
    for t in range(L):
        h = _gru_step(P, H, GX[:, t, :], h)
        hs.append(h)
    return hs


def _gru_heads(g, P, h, x_prev):
    mean = h @ P["W_mu"] + x_prev @ P["W_skip"] + x_prev + P["b_mu"]
    sd = (h @ P["W_sd"] + P["b_sd"]).softplus() + SD_FLOOR
    return mean, sd


def _rollout_gru(g, params, P, xs, eps, B, n, tau):
    H = int(params.config["hidden"])
    d = params.d
    T = xs.value.shape[2]
    hs = _encode(g, params, P, xs.transpose(0, 2, 1))
    h = hs[-1].reshape(B, 1, H).broadcast_to((B, n, H))
    x_prev = xs[:, :, T - 1].reshape(B, 1, d).broadcast_to((B, n, d))
    steps = []
    for k in range(tau):
        mean, sd = _gru_heads(g, P, h, x_prev)
        y = _emit(g, P, params, mean, sd, eps[:, :, k, :])
        steps.append(y)
        if k + 1 < tau:
            h = _gru_step(P, H, y @ P["W_in"] + P["b_gru"], h)
        x_prev = y
    return steps


def stack_steps(steps):
    """List of tau (B, n, d) nodes -> (B, n, d, tau) node."""
    return stack(steps, axis=-1)


# --------------------------------------------------------------------------
# sampling


def sample_paths(params, x, n, seed=None, *, zero_noise=False, horizon=None):
    """Draw ``n`` reparameterized future paths given history ``x`` (d x T)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != params.d:
        raise ValueError(f"history must be (d={params.d}, T), got {x.shape}")
    horizon = params.horizon if horizon is None else horizon
    rng = np.random.default_rng(seed)
    eps = draw_noise(rng, params, 1, n, horizon)
    if zero_noise:
        eps = np.zeros_like(eps)
    g = Graph()
    steps = rollout(params, g.const(x[None]), eps)
    paths = np.stack([s.value[0] for s in steps], axis=-1)
    return PredictiveSamples(paths, seed)


def predictive_mean_closed_form(params, x, h):
    """Exact h-step-ahead mean of a ``linear-var`` model (data units)."""
    if params.kind != LINEAR_VAR:
        raise TypeError("closed-form predictive mean is only defined for linear-var models")
    if h < 1:
        raise ValueError("horizon must be >= 1")
    A = params.arrays["coef"]
    c = params.arrays["bias"]
    p = params.order
    xs = np.asarray(x, dtype=np.float64) / params.scale[:, None]
    lags = [xs[:, -1 - l] for l in range(p)]
    for _ in range(h):
        m = c + sum(A[l] @ lags[l] for l in range(p))
        lags = [m] + lags[:-1]
    return lags[0] * params.scale


def companion(params):
    """Companion matrix of a linear-var model (scaled units)."""
    A = params.arrays["coef"]
    p, d, _ = A.shape
    C = np.zeros((d * p, d * p))
    C[:d, :] = np.concatenate(list(A), axis=1)
    if p > 1:
        C[d:, :-d] = np.eye(d * (p - 1))
    return C


def predictive_cov_closed_form(params, h):
    """Exact h-step-ahead covariance of a ``linear-var`` model (data units)."""
    if params.kind != LINEAR_VAR:
        raise TypeError("closed-form covariance is only defined for linear-var models")
    d, p = params.d, params.order
    C = companion(params)
    sd = _softplus(params.arrays["sd_raw"])
    Q = np.zeros((d * p, d * p))
    Q[:d, :d] = np.diag(sd ** 2)
    S = np.zeros_like(Q)
    for _ in range(h):
        S = C @ S @ C.T + Q
    return S[:d, :d] * np.outer(params.scale, params.scale)


# --------------------------------------------------------------------------
# training


def compute_scale(windows):
    stacked = np.concatenate([np.concatenate([w.x, w.y_true], axis=1) for w in windows], axis=1)
    s = np.mean(np.abs(stacked), axis=1)
    return np.where(s > 0, s, 1.0)


def _check_dataset(windows):
    if not windows:
        raise ValueError("dataset is empty")
    d = windows[0].d
    tau = windows[0].tau
    for w in windows:
        if w.d != d:
            raise ValueError("windows do not share the same number of series")
        if w.tau != tau:
            raise ValueError("windows do not share the same horizon")
    return d, tau


def batch_arrays(windows):
    X = np.stack([w.x for w in windows])
    Y = np.stack([w.y_true for w in windows])
    return X, Y


def conditional_nll(params, X, Y, leaves=None, trainable=True):
    """Mean per-step negative log-likelihood of ``Y`` given history ``X``.

    ``X`` is a node or array (B, d, T), ``Y`` an array (B, d, tau); both in
    data units.  Teacher forcing: each future step is conditioned on the true
    previous values.  Evaluated on mean-scaled values.  Returns ``(graph, node)``.
    """
    if isinstance(X, Node):
        g = X.graph
    else:
        g = Graph()
        X = g.const(X)
    P = leaves if leaves is not None else _leaves(g, params, trainable=trainable)
    inv = (1.0 / params.scale)[:, None]
    xs = X * g.const(inv)
    ys = np.asarray(Y) * inv
    B, d, T = X.value.shape
    tau = ys.shape[2]
    ys_t = g.const(np.transpose(ys, (0, 2, 1)))  # (B, tau, d)
    V = P["V"] if params.rank > 0 else None
    if params.kind == LINEAR_VAR:
        p = params.order
        if T < p:
            raise ValueError(f"history length {T} shorter than VAR order {p}")
        seq = concat([xs[:, :, T - p:], g.const(ys[:, :, : tau - 1])], axis=2) if tau > 1 else xs[:, :, T - p:]
        seq_t = seq.transpose(0, 2, 1)  # (B, p + tau - 1, d)
        lag_blocks = [seq_t[:, p - 1 - l: p - 1 - l + tau, :] for l in range(p)]
        Z = lag_blocks[0] if p == 1 else concat(lag_blocks, axis=-1)
        mean = Z @ _var_weight(P, params) + P["bias"]
        sd = P["sd_raw"].softplus()
        ll = lowrank_logpdf(ys_t, mean, sd * sd, V)
    else:
        H = int(params.config["hidden"])
        inputs = concat([xs, g.const(ys[:, :, : tau - 1])], axis=2) if tau > 1 else xs
        hs = _encode(g, params, P, inputs.transpose(0, 2, 1))
        hfut = stack(hs[T - 1:], axis=1)  # (B, tau, H)
        prev = inputs.transpose(0, 2, 1)[:, T - 1:, :]  # (B, tau, d)
        mean, sd = _gru_heads(g, P, hfut, prev)
        ll = lowrank_logpdf(ys_t, mean, sd * sd, V)
    return g, -ll.mean()


def fit(dataset, config=None, *, init=None, history=None):
    """Maximum-likelihood training of a forecaster on a list of windows.

    ``linear-var`` uses ordinary least squares (the exact conditional MLE)
    unless ``config.method == "adam"``.  The recurrent model is trained with
    full-batch Adam.  ``history`` (a list) receives the per-epoch NLL.
    """
    config = config or FitConfig()
    d, tau = _check_dataset(dataset)
    if tau != config.horizon:
        config = replace(config, horizon=tau)
    scale = compute_scale(dataset) if init is None else init.scale
    if config.kind == LINEAR_VAR and config.method in ("auto", "ols") and init is None:
        return _fit_var_ols(dataset, config, scale)
    params = init or init_params(config.kind, d, tau, scale, order=config.order,
                                 hidden=config.hidden, rank=config.rank, seed=config.seed)
    X, Y = batch_arrays(dataset)
    opt = Adam(params.arrays, lr=config.lr, clip_norm=config.clip_norm)
    arrays = dict(params.arrays)
    trace = [] if history is None else history
    best_loss, best_arrays = math.inf, arrays
    for epoch in range(config.epochs):
        new, loss = model_step(params.with_arrays(arrays), opt, arrays, X, Y)
        if loss > best_loss + config.nll_tolerance:
            # overshoot: return to the best point and halve the step
            log.debug("fit epoch %d nll %.5f above best %.5f; lr -> %g", epoch, loss, best_loss, opt.lr / 2)
            arrays = best_arrays
            opt.lr *= 0.5
            continue
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_arrays = loss, arrays
        arrays = new
        if epoch % 50 == 0:
            log.debug("fit epoch %d nll %.5f", epoch, loss)
    _, node = conditional_nll(params.with_arrays(arrays), X, Y, trainable=False)
    if float(node.value) > best_loss + config.nll_tolerance:
        arrays = best_arrays
        _, node = conditional_nll(params.with_arrays(arrays), X, Y, trainable=False)
    trace.append(float(node.value))
    return params.with_arrays(arrays)


def model_step(params, opt, arrays, X, Y):
    """One Adam step on the conditional NLL; returns (new arrays, loss before step)."""
    try:
        g, loss = conditional_nll(params, X, Y)
        grads = g.backward(loss)
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"NLL became non-finite: {exc}") from exc
    value = float(loss.value)
    new = opt.step(arrays, grads)
    if not all(np.all(np.isfinite(v)) for v in new.values()):
        raise TrainingDivergedError(f"parameters became non-finite (last nll {value:.4g})")
    return new, value


def _fit_var_ols(dataset, config, scale):
    p = config.order
    rows_z, rows_y = [], []
    for w in dataset:
        seq = np.concatenate([w.x, w.y_true], axis=1) / scale[:, None]
        T = w.T
        if T < p:
            raise ValueError(f"history length {T} shorter than VAR order {p}")
        for t in range(T, T + w.tau):
            rows_z.append(np.concatenate([seq[:, t - 1 - l] for l in range(p)]))
            rows_y.append(seq[:, t])
    Z = np.asarray(rows_z)
    Yt = np.asarray(rows_y)
    design = np.hstack([Z, np.ones((Z.shape[0], 1))])
    sol, *_ = np.linalg.lstsq(design, Yt, rcond=None)
    d = scale.shape[0]
    W = sol[:-1]  # (p d, d)
    coef = W.T.reshape(d, p, d).transpose(1, 0, 2)
    resid = Yt - design @ sol
    sd = np.maximum(resid.std(axis=0), 1e-6)
    arrays = {"coef": coef, "bias": sol[-1], "sd_raw": _softplus_inv(sd)}
    cfg = {"d": d, "horizon": config.horizon, "order": p, "rank": 0}
    return ForecasterParams(LINEAR_VAR, arrays, cfg, scale)


def training_nll(params, dataset):
    X, Y = batch_arrays(dataset)
    _, node = conditional_nll(params, X, Y, trainable=False)
    return float(node.value)


# --------------------------------------------------------------------------
# checkpoints


def params_to_dict(params):
    return {
        "schema": CHECKPOINT_SCHEMA,
        "kind": params.kind,
        "config": dict(params.config),
        "scale": params.scale.tolist(),
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.arrays.items()},
        "metadata": params.metadata,
    }


def params_from_dict(obj):
    if obj.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {obj.get('schema')!r}")
    arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["arrays"].items()}
    return ForecasterParams(obj["kind"], arrays, obj["config"], np.array(obj["scale"]), obj.get("metadata", {}))


def save_checkpoint(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
