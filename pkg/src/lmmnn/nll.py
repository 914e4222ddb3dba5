"""Gaussian negative log-likelihood training for mixed-effects networks.

Each mini-batch is scored with the inverse of its own ``m x m`` covariance
``V_batch = g(Z_b) D g(Z_b)' + sig2e I``, never with a block of the full
inverse. Network weights and the unconstrained variance components are
updated together by one optimizer.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from . import linalg
from .covariance import (SpatialRBF, VarianceComponents, as_spec, batch_covariance,
                         initial_theta, is_block_diagonal)
from .neuralnet import EmbeddingMap, FeedForward, NetConfig, make_optimizer

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class BatchLossResult:
    nll: float
    grad_f: np.ndarray
    grad_theta: np.ndarray
    alpha: np.ndarray
    grad_G: Optional[np.ndarray] = None


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 500
    patience: int = 10
    validation_fraction: float = 0.1
    seed: Optional[int] = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d or {}))


def nll_full(e, V):
    """``e' V^{-1} e / 2 + log|V| / 2 + n log(2 pi) / 2``."""
    e = np.asarray(e, dtype=float)
    factor = linalg.cholesky(V)
    alpha = linalg.solve(factor, e)
    return 0.5 * float(e @ alpha) + 0.5 * linalg.logdet(factor) + 0.5 * e.size * LOG_2PI


def grad_theta(e, factor, dVs, alpha=None, Vinv=None):
    """Gradient of the batch NLL in each direction ``dV``.

    ``-alpha' dV alpha / 2 + tr(V^{-1} dV) / 2`` with ``alpha = V^{-1} e``;
    the trace is the entrywise sum of ``V^{-1} * dV`` (both symmetric).
    """
    if alpha is None:
        alpha = linalg.solve(factor, e)
    if Vinv is None:
        Vinv = linalg.inverse(factor)
    return np.array([-0.5 * alpha @ dV @ alpha + 0.5 * np.sum(Vinv * dV) for dV in dVs])


def nll_batch(e, spec, theta, data, G=None):
    """NLL of one batch and its gradients w.r.t. ``f`` outputs, theta and ``G``."""
    e = np.asarray(e, dtype=float)
    if e.size < 2:
        raise ValueError("batch size must be >= 2")
    spec = as_spec(spec)
    V, dVs = batch_covariance(spec, theta, data, G)
    factor = linalg.cholesky(V)
    alpha = linalg.solve(factor, e)
    Vinv = linalg.inverse(factor)
    nll = 0.5 * float(e @ alpha) + 0.5 * linalg.logdet(factor) + 0.5 * e.size * LOG_2PI
    gt = grad_theta(e, factor, dVs, alpha, Vinv)
    grad_G = None
    if spec.learned_g:
        # d/dG of the NLL for V = s2 G G' + sig2e I
        grad_G = theta.psi[0] * ((Vinv - np.outer(alpha, alpha)) @ G)
    if not (np.isfinite(nll) and np.all(np.isfinite(gt))):
        raise FloatingPointError("non-finite batch NLL")
    return BatchLossResult(nll, -alpha, gt, alpha, grad_G)


def gradient_decomposition_check(e, spec, theta, data):
    """Max abs gap between the full-data theta gradient and the sum of
    per-cluster gradients (clusters taken as batches)."""
    spec = as_spec(spec)
    blocks = is_block_diagonal(spec, data)
    if blocks is None:
        raise ValueError("spec has no block-diagonal covariance")
    e = np.asarray(e, dtype=float)
    V, dVs = batch_covariance(spec, theta, data)
    full = grad_theta(e, linalg.cholesky(V), dVs)
    total = np.zeros_like(full)
    start = 0
    for size in blocks:
        rows = np.arange(start, start + size)
        Vb, dVb = batch_covariance(spec, theta, data.take(rows))
        total += grad_theta(e[rows], linalg.cholesky(Vb), dVb)
        start += size
    return float(np.max(np.abs(full - total)))


# --------------------------------------------------------------------------
# generic loop


@dataclass
class History:
    columns: tuple = ("epoch", "train_nll", "val_nll")
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(self.columns))

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def __len__(self):
        return len(self.rows)


def split_validation(n, fraction, rng):
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 2:
        raise ValueError("too few rows (%d) for a validation split" % n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def random_batches(rows, batch_size, rng):
    """Shuffled batches of ``batch_size``; a trailing singleton joins the last batch."""
    rows = rng.permutation(rows)
    batches = [rows[i:i + batch_size] for i in range(0, rows.size, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def fit_loop(params, objective, train_rows, val_rows, cfg, rng, make_batches=None,
             extra_columns=(), extra_values=None, loss_names=("train_nll", "val_nll")):
    """Mini-batch training with early stopping on validation loss.

    ``objective(params, rows, training, rng)`` returns ``(loss, grads)``;
    ``grads`` may be ``None`` when ``training`` is false. ``params`` is
    updated in place and left at the best-validation snapshot.
    """
    if make_batches is None:
        def make_batches(rows, rng_):
            return random_batches(rows, cfg.batch_size, rng_)
    history = History(("epoch",) + tuple(loss_names) + tuple(extra_columns))
    if cfg.epochs == 0:
        return history
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    val_batches = make_batches(val_rows, np.random.default_rng(0)) if val_rows.size >= 2 \
        else [val_rows]
    best, best_params, wait = np.inf, copy.deepcopy(params), 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b, rows in enumerate(make_batches(train_rows, rng)):
            loss, grads = objective(params, rows, True, rng)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite loss at epoch %d, batch %d" % (epoch, b))
            opt.step(params, grads)
            losses.append(loss)
        val = float(np.mean([objective(params, rows, False, None)[0] for rows in val_batches]))
        extra = list(extra_values(params)) if extra_values else []
        history.rows.append([epoch, float(np.mean(losses)), val] + extra)
        if val < best:
            best, wait, history.best_epoch = val, 0, epoch
            best_params = copy.deepcopy(params)
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    for k, v in best_params.items():
        np.copyto(params[k], v)
    return history


# --------------------------------------------------------------------------
# LMMNN


@dataclass
class TrainResult:
    net: FeedForward
    theta: VarianceComponents
    history: History
    g_net: object = None

    @property
    def epochs(self):
        return len(self.history)


def make_g_net(spec, net_config, rng):
    """Learned ``g``: a lookup table for levels, an MLP for 2-D locations."""
    spec = as_spec(spec)
    if not spec.learned_g:
        return None
    if isinstance(spec.kind, SpatialRBF):
        return FeedForward(2, net_config.g_hidden, spec.embed_dim, dropout=0.0, rng=rng)
    return EmbeddingMap(spec.kind.q, spec.embed_dim, rng)


def g_inputs(spec, g_net, data):
    if isinstance(g_net, FeedForward):
        return data.coords[data.ids[:, 0]]
    return data.ids[:, 0]


def _net_params(net, g_net, theta_u):
    params = {"f." + k: v for k, v in net.params.items()}
    if g_net is not None:
        params.update({"g." + k: v for k, v in g_net.params.items()})
    params["theta"] = theta_u
    return params


def train(X, y, data, spec, net_config=None, cfg=None, theta0=None):
    """Fit ``f`` (and a learned ``g``) plus theta by mini-batch NLL.

    Returns a :class:`TrainResult` holding the parameters at the epoch with
    the best validation NLL.
    """
    spec = as_spec(spec)
    net_config = net_config or NetConfig()
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0] or data.n != y.shape[0]:
        raise ValueError("X, y and random-effect data must have the same number of rows")
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, split_ss, loop_ss = ss.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    net = FeedForward(X.shape[1], net_config.hidden, 1, net_config.dropout, rng=init_rng)
    g_net = make_g_net(spec, net_config, init_rng)
    theta0 = theta0 or initial_theta(spec)
    params = _net_params(net, g_net, theta0.unconstrained.copy())
    n_psi = len(spec.psi_names)
    train_rows, val_rows = split_validation(y.size, cfg.validation_fraction,
                                            np.random.default_rng(split_ss))

    def objective(params, rows, training, rng):
        f, cache = net.forward(X[rows], training=training, rng=rng)
        theta = VarianceComponents.from_unconstrained(params["theta"], n_psi)
        sub = data.take(rows)
        G = g_cache = None
        if g_net is not None:
            G, g_cache = g_net.forward(g_inputs(spec, g_net, sub), training=training, rng=rng)
        res = nll_batch(y[rows] - f[:, 0], spec, theta, sub, G)
        if not training:
            return res.nll, None
        grads = {"f." + k: v for k, v in net.backward(cache, res.grad_f[:, None]).items()}
        if g_net is not None:
            grads.update({"g." + k: v for k, v in g_net.backward(g_cache, res.grad_G).items()})
        grads["theta"] = res.grad_theta
        return res.nll, grads

    def theta_values(params):
        return VarianceComponents.from_unconstrained(params["theta"], n_psi).as_vector()

    history = fit_loop(params, objective, train_rows, val_rows, cfg,
                       np.random.default_rng(loop_ss), extra_columns=spec.param_names,
                       extra_values=theta_values)
    theta = VarianceComponents.from_unconstrained(params["theta"], n_psi)
    return TrainResult(net, theta, history, g_net)
