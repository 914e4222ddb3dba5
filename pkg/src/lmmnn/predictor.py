"""Random-effect prediction (BLUP) and response prediction.

``b_hat = D g(Z)' V^{-1} (y - f(X))`` is computed by whichever route the
structure allows:

``block``
    cluster-sorted block solves when ``V`` is block-diagonal;
``qspace``
    the equivalent ``(D Z'Z + sig2e I)^{-1} D Z' e`` when the random-effect
    dimension is small;
``dense``
    one Cholesky of the full ``n x n`` ``V`` up to ``dense_cap`` rows;
``subsample``
    the dense route on a uniform row sample of size ``sample_size``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from . import linalg
from .covariance import (Longitudinal, MultipleCategorical, RandomIntercepts, SpatialRBF,
                         as_spec, batch_covariance, build_D, build_Z, is_block_diagonal,
                         known_mask, longitudinal_cov, rbf_kernel)

DENSE_CAP = 20000
SAMPLE_SIZE = 10000
QSPACE_CAP = 6000


@dataclass
class FittedModel:
    """Everything prediction needs from a trained model.

    ``net`` may be ``None`` when only ``fixed_fn`` is supplied (a callable
    ``X -> f_hat``); ``G_train`` is the learned ``g(Z_train)`` when ``g`` is
    not the identity.
    """

    spec: object
    theta: object
    train_re: object
    residuals: np.ndarray
    net: object = None
    g_net: object = None
    G_train: Optional[np.ndarray] = None
    fixed_fn: object = None
    b_hat: Optional[np.ndarray] = None

    def __post_init__(self):
        self.spec = as_spec(self.spec)
        self.residuals = np.asarray(self.residuals, dtype=float)
        if self.residuals.size != self.train_re.n:
            raise ValueError("residual length must equal the number of training rows")

    def f_hat(self, X):
        if self.fixed_fn is not None:
            return np.asarray(self.fixed_fn(X), dtype=float)
        return self.net.predict(X)[:, 0]


def D_matvec(spec, theta, data, v):
    """``D @ v`` without forming ``D`` for diagonal and Kronecker structures."""
    spec = as_spec(spec)
    v = np.asarray(v, dtype=float)
    if spec.learned_g:
        return theta.psi[0] * v
    out = np.empty_like(v)
    for comp, ps, rs, _, off in spec.components():
        seg = v[off:off + comp.width]
        psi = theta.psi[ps]
        if isinstance(comp, RandomIntercepts):
            out[off:off + comp.width] = psi[0] * seg
        elif isinstance(comp, MultipleCategorical):
            out[off:off + comp.width] = np.repeat(psi, comp.qs) * seg
        elif isinstance(comp, Longitudinal):
            C = longitudinal_cov(comp, psi, theta.rhos[rs])
            out[off:off + comp.width] = (C @ seg.reshape(comp.order, comp.q)).ravel()
        elif isinstance(comp, SpatialRBF):
            out[off:off + comp.width] = rbf_kernel(data.coords[:comp.q], psi[0], psi[1]) @ seg
    return out


def _design(fitted, data=None, rows=None):
    """``g(Z)`` for the training rows (sparse for identity g, dense G otherwise)."""
    if fitted.spec.learned_g:
        G = fitted.G_train
        return G if rows is None else G[rows]
    data = fitted.train_re if data is None else data
    return build_Z(fitted.spec, data, rows)


def _alpha_dense(fitted, rows):
    data = fitted.train_re.take(rows)
    G = fitted.G_train[rows] if fitted.spec.learned_g else None
    V, _ = batch_covariance(fitted.spec, fitted.theta, data, G, with_grad=False)
    return linalg.solve(linalg.cholesky(V), fitted.residuals[rows])


def _from_alpha(fitted, alpha, rows=None):
    gZ = _design(fitted, rows=rows)
    return D_matvec(fitted.spec, fitted.theta, fitted.train_re, np.asarray(gZ.T @ alpha).ravel())


def _blup_block(fitted):
    data = fitted.train_re
    order = np.argsort(data.ids[:, 0], kind="stable")
    sorted_data = data.take(order)
    sizes = None if fitted.spec.learned_g else is_block_diagonal(fitted.spec, sorted_data)
    if sizes is None:
        raise ValueError("covariance is not block-diagonal; use the qspace or dense route")
    blocks, start = [], 0
    for size in sizes:
        V, _ = batch_covariance(fitted.spec, fitted.theta,
                                sorted_data.take(np.arange(start, start + size)), with_grad=False)
        blocks.append(V)
        start += size
    alpha_sorted = linalg.block_solve(blocks, fitted.residuals[order])
    alpha = np.empty_like(alpha_sorted)
    alpha[order] = alpha_sorted
    return _from_alpha(fitted, alpha)


def _blup_qspace(fitted):
    gZ = _design(fitted)
    D = build_D(fitted.spec, fitted.theta, fitted.train_re)
    ZtZ = gZ.T @ gZ
    ZtZ = ZtZ.toarray() if hasattr(ZtZ, "toarray") else np.asarray(ZtZ)
    rhs = D @ np.asarray(gZ.T @ fitted.residuals).ravel()
    A = D @ ZtZ + fitted.theta.sig2e * np.eye(D.shape[0])
    return np.linalg.solve(A, rhs)


def subsample_blup(fitted, sample_size=SAMPLE_SIZE, seed=0):
    """The dense BLUP restricted to a uniform sample of training rows."""
    n = fitted.residuals.size
    if sample_size < 2:
        raise ValueError("sample size must be >= 2")
    if sample_size > n:
        raise ValueError("sample size %d exceeds %d training rows" % (sample_size, n))
    rows = np.sort(np.random.default_rng(seed).choice(n, sample_size, replace=False))
    return _from_alpha(fitted, _alpha_dense(fitted, rows), rows)


def blup(fitted, method="auto", dense_cap=DENSE_CAP, sample_size=SAMPLE_SIZE, seed=0):
    """Predicted random effects for every column of ``g(Z)``."""
    spec, theta = fitted.spec, fitted.theta
    if all(v == 0 for v in theta.psi):
        return np.zeros(spec.width)
    n = fitted.residuals.size
    if method == "auto":
        if not spec.learned_g and isinstance(spec.kind, (RandomIntercepts, Longitudinal)) or (
                isinstance(spec.kind, MultipleCategorical) and spec.kind.nested):
            method = "block"
        elif spec.width <= QSPACE_CAP:
            method = "qspace"
        elif n <= dense_cap:
            method = "dense"
        else:
            method = "subsample"
    if method == "block":
        return _blup_block(fitted)
    if method == "qspace":
        return _blup_qspace(fitted)
    if method == "dense":
        return _from_alpha(fitted, _alpha_dense(fitted, np.arange(n)))
    if method == "subsample":
        return subsample_blup(fitted, min(sample_size, n), seed)
    raise ValueError("unknown BLUP method %r" % method)


def blup_intercepts_fast(e, ids, q, theta):
    """Random-intercept BLUP by per-cluster shrinkage of mean residuals.

    ``b_j = n_j s2b / (s2e + n_j s2b) * mean(e_j)``; levels with no
    training rows get 0.
    """
    e = np.asarray(e, dtype=float)
    ids = np.asarray(ids).ravel()
    counts = np.bincount(ids, minlength=q).astype(float)
    sums = np.bincount(ids, weights=e, minlength=q)
    s2b, s2e = theta.psi[0], theta.sig2e
    out = np.zeros(q)
    seen = counts > 0
    # n_j s2b / (s2e + n_j s2b) * sum_j / n_j, written to avoid dividing by n_j
    out[seen] = s2b * sums[seen] / (s2e + counts[seen] * s2b)
    return out


def re_design(fitted, X, re):
    """``g(Z_te)``; unseen levels give zero rows."""
    spec = fitted.spec
    if not spec.learned_g:
        return build_Z(spec, re, training=False)
    from .nll import g_inputs
    mask = known_mask(spec, re) if not isinstance(spec.kind, SpatialRBF) else np.ones(re.n, bool)
    G = np.zeros((re.n, spec.embed_dim))
    if mask.any():
        G[mask] = fitted.g_net.forward(g_inputs(spec, fitted.g_net, re.take(np.nonzero(mask)[0])))[0]
    return G


def predict(fitted, X, re):
    """``f_hat(X) + g(Z) b_hat``; rows with unseen levels get the fixed part only."""
    if fitted.b_hat is None:
        fitted.b_hat = blup(fitted)
    gZ = re_design(fitted, X, re)
    return fitted.f_hat(X) + np.asarray(gZ @ fitted.b_hat).ravel()


def mse(y, y_hat):
    y, y_hat = np.asarray(y, dtype=float), np.asarray(y_hat, dtype=float)
    if y.size == 0:
        raise ValueError("empty input")
    if y.shape != y_hat.shape:
        raise ValueError("length mismatch: %d vs %d" % (y.size, y_hat.size))
    return float(np.mean((y - y_hat) ** 2))


def mean_se(values):
    """Mean and standard error (sample std / sqrt(reps)) of replication metrics."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty input")
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(np.mean(v)), se


def write_predictions(path, y_true, y_pred, row_id=None):
    row_id = np.arange(len(y_pred)) if row_id is None else row_id
    pd.DataFrame({"row_id": row_id, "y_true": y_true, "y_pred": y_pred}).to_csv(path, index=False)


def write_blup(path, b_hat, id_name="level_id"):
    pd.DataFrame({id_name: np.arange(len(b_hat)), "b_hat": b_hat}).to_csv(path, index=False)
