"""Binary random-intercept GLMM fitted by Gauss-Hermite quadrature.

The marginal likelihood of cluster ``j`` integrates the Bernoulli-logit
likelihood of its rows against ``N(0, sig2b)``. With nodes ``x_k`` and
weights ``w_k`` for ``exp(-x^2)`` and ``a_k = sqrt(2) sigma_b x_k``::

    NLL_j = -log sum_k (w_k / sqrt(pi)) exp(S_jk)
    S_jk  = sum_i y_ij (f_ij + a_k) - log(1 + exp(f_ij + a_k))

Everything is evaluated in log-space with a per-cluster shift.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .neuralnet import FeedForward, NetConfig
from .nll import History, TrainConfig, fit_loop, split_validation

SQRT_PI = np.sqrt(np.pi)
DEFAULT_K = 5
LOGIT_CLIP = 30.0


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def K(self):
        return self.nodes.size


def hermite_rule(K=DEFAULT_K):
    """Physicists' Gauss-Hermite rule by Golub-Welsch.

    The nodes are the eigenvalues of the symmetric Jacobi matrix of the
    Hermite recurrence (off-diagonal ``sqrt(k/2)``). Each weight is
    ``1 / sum_j p_j(x)^2`` over the orthonormal Hermite polynomials, which
    keeps full relative accuracy in the far tails where the eigenvector
    form loses digits.
    """
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= 50:
        raise ValueError("K must be an integer in [1, 50], got %r" % (K,))
    J = np.diag(np.sqrt(np.arange(1, K) / 2.0), 1)
    x = np.linalg.eigvalsh(J + J.T)
    # enforce the exact symmetry of the rule
    x = 0.5 * (x - x[::-1])
    if K % 2:
        x[K // 2] = 0.0
    p_prev, p = np.zeros(K), np.full(K, np.pi ** -0.25)
    total = p * p
    for j in range(K - 1):
        p_prev, p = p, np.sqrt(2.0 / (j + 1)) * x * p - np.sqrt(j / (j + 1.0)) * p_prev
        total += p * p
    w = 1.0 / total
    return QuadratureRule(x, 0.5 * (w + w[::-1]))


@dataclass
class ClusterIndex:
    """Row-to-cluster labels for ``q`` clusters; ``labels[i]`` in ``[0, q)``."""

    labels: np.ndarray
    q: int
    sizes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.q):
            raise ValueError("cluster label out of range [0, %d)" % self.q)
        self.sizes = np.bincount(self.labels, minlength=self.q)

    def rows(self, j):
        return np.nonzero(self.labels == j)[0]

    def take(self, rows):
        return ClusterIndex(self.labels[rows], self.q)


@dataclass
class GLMMLoss:
    value: float
    per_cluster: np.ndarray
    grad_f: np.ndarray
    grad_logvar: float


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _node_terms(f, y, sigma_b, clusters, rule):
    """``T_jk = S_jk + log(w_k / sqrt(pi))`` and the per-row logits ``f_i + a_k``."""
    a = np.sqrt(2.0) * sigma_b * rule.nodes
    eta = f[:, None] + a[None, :]
    ll = y[:, None] * eta - _softplus(eta)
    S = np.stack([np.bincount(clusters.labels, weights=ll[:, k], minlength=clusters.q)
                  for k in range(rule.K)], axis=1)
    return S + np.log(rule.weights / SQRT_PI)[None, :], eta, a


def _log_softmax_rows(T):
    shift = T.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.sum(np.exp(T - shift), axis=1))
    return lse, np.exp(T - lse[:, None])


def _check(f, y, sigma_b, clusters):
    f = np.asarray(f, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(f)):
        raise FloatingPointError("non-finite network outputs")
    if f.shape != y.shape or f.size != clusters.labels.size:
        raise ValueError("f, y and cluster labels must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    if not sigma_b >= 0:
        raise ValueError("sigma_b must be >= 0")
    return f, y


def nll_glmm(f, y, sigma_b, clusters, rule=None):
    """Quadrature NLL with gradients w.r.t. ``f`` and ``log sig2b``.

    Clusters with no rows contribute exactly zero.
    """
    rule = rule or hermite_rule()
    f, y = _check(f, y, sigma_b, clusters)
    T, eta, a = _node_terms(f, y, sigma_b, clusters, rule)
    lse, P = _log_softmax_rows(T)
    present = clusters.sizes > 0
    per_cluster = np.where(present, -lse, 0.0)
    # d S_jk / d eta_ik = y_i - sigmoid(eta_ik)
    r = y[:, None] - _sigmoid(eta)
    Prow = P[clusters.labels]
    grad_f = -np.sum(Prow * r, axis=1)
    R = np.stack([np.bincount(clusters.labels, weights=r[:, k], minlength=clusters.q)
                  for k in range(rule.K)], axis=1)
    # a_k = sqrt(2) sigma_b x_k and d sigma_b / d log sig2b = sigma_b / 2
    grad_logvar = -0.5 * float(np.sum(P[present] * R[present] * a[None, :]))
    value = float(np.sum(per_cluster))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite GLMM NLL")
    return GLMMLoss(value, per_cluster, grad_f, grad_logvar)


def predict_b_quadrature(f, y, sigma_b, clusters, rule=None):
    """Posterior mean of each random intercept, ``sum_k P_jk a_k``.

    ``P_jk`` are the normalized node terms of the cluster's likelihood, so
    this is the ratio of the quadrature approximations of ``E[b h]`` and
    ``E[h]``. Clusters without rows, and ``sigma_b = 0``, give 0.
    """
    rule = rule or hermite_rule()
    f, y = _check(f, y, sigma_b, clusters)
    if sigma_b == 0:
        return np.zeros(clusters.q)
    T, _, a = _node_terms(f, y, sigma_b, clusters, rule)
    _, P = _log_softmax_rows(T)
    b = P @ a
    if not np.all(np.isfinite(b)):
        raise FloatingPointError("non-finite posterior mean")
    b[clusters.sizes == 0] = 0.0
    return b


def predict_prob(f, b_hat, labels):
    """``sigmoid(f + b_hat[label])`` with logits clipped to +-30; labels outside
    ``b_hat`` get no random part."""
    f = np.asarray(f, dtype=float).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    known = (labels >= 0) & (labels < len(b_hat))
    b = np.zeros_like(f)
    b[known] = np.asarray(b_hat)[labels[known]]
    eta = np.clip(f + b, -LOGIT_CLIP, LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-eta))


def auc(scores, labels):
    """Area under the ROC curve as the normalized Mann-Whitney U; ties count half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def cluster_batches(labels, batch_size, rng):
    """Whole clusters in random order, packed greedily up to ``batch_size`` rows.

    A cluster larger than the budget forms a batch of its own.
    """
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    uniq, starts = np.unique(labels[order], return_index=True)
    bounds = np.append(starts, labels.size)
    groups = [order[bounds[i]:bounds[i + 1]] for i in range(uniq.size)]
    batches, cur, cur_n = [], [], 0
    for i in rng.permutation(len(groups)):
        g = groups[i]
        if cur and cur_n + g.size > batch_size:
            batches.append(np.concatenate(cur))
            cur, cur_n = [], 0
        cur.append(g)
        cur_n += g.size
    if cur:
        batches.append(np.concatenate(cur))
    return batches


@dataclass
class GLMMResult:
    net: FeedForward
    sig2b: float
    history: History
    b_hat: np.ndarray = None

    @property
    def epochs(self):
        return len(self.history)

    def predict_proba(self, X, labels):
        return predict_prob(self.net.predict(X)[:, 0], self.b_hat, labels)


def train_glmm(X, y, labels, q, net_config=None, cfg=None, K=DEFAULT_K, sig2b0=1.0):
    """Fit ``f`` and ``sig2b`` by mini-batch quadrature NLL, then predict ``b``.

    Batches are unions of whole clusters, which keeps each batch loss an
    exact sum of cluster terms.
    """
    net_config = net_config or NetConfig()
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    clusters = ClusterIndex(labels, q)
    if X.shape[0] != y.size:
        raise ValueError("X and y must have the same number of rows")
    rule = hermite_rule(K)
    init_ss, split_ss, loop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    net = FeedForward(X.shape[1], net_config.hidden, 1, net_config.dropout,
                      rng=np.random.default_rng(init_ss))
    params = {"f." + k: v for k, v in net.params.items()}
    params["theta"] = np.array([np.log(sig2b0)])
    train_rows, val_rows = split_validation(y.size, cfg.validation_fraction,
                                            np.random.default_rng(split_ss))

    def objective(params, rows, training, rng):
        out, cache = net.forward(X[rows], training=training, rng=rng)
        sigma_b = float(np.exp(0.5 * params["theta"][0]))
        loss = nll_glmm(out[:, 0], y[rows], sigma_b, clusters.take(rows), rule)
        if not training:
            return loss.value, None
        grads = {"f." + k: v for k, v in net.backward(cache, loss.grad_f[:, None]).items()}
        grads["theta"] = np.array([loss.grad_logvar])
        return loss.value, grads

    def make_batches(rows, rng):
        return [rows[b] for b in cluster_batches(clusters.labels[rows], cfg.batch_size, rng)]

    history = fit_loop(params, objective, train_rows, val_rows, cfg,
                       np.random.default_rng(loop_ss), make_batches=make_batches,
                       extra_columns=("sig2b",),
                       extra_values=lambda p: [float(np.exp(p["theta"][0]))])
    sig2b = float(np.exp(params["theta"][0]))
    f_tr = net.predict(X)[:, 0]
    b_hat = predict_b_quadrature(f_tr, y, np.sqrt(sig2b), clusters, rule)
    return GLMMResult(net, sig2b, history, b_hat)
