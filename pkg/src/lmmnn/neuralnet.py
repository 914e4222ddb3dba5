"""A small feed-forward network with hand-written backpropagation.

Only what the mixed models need: dense layers (ReLU or linear), inverted
dropout, embedding tables and two optimizers. Parameters live in a plain
``dict`` of float64 arrays so the variance components can ride along in
the same optimizer.
"""

from dataclasses import dataclass

import numpy as np

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    activation: str = "linear"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dense", "dropout", "embedding"):
            raise ValueError("unknown layer kind %r" % self.kind)
        if self.kind in ("dense", "embedding") and (self.n_in < 1 or self.n_out < 1):
            raise ValueError("layer dimensions must be positive")
        if self.kind == "dense" and self.activation not in ("relu", "linear"):
            raise ValueError("unknown activation %r" % self.activation)
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    @classmethod
    def dense(cls, n_in, n_out, activation="relu"):
        return cls("dense", n_in, n_out, activation)

    @classmethod
    def dropout(cls, rate):
        return cls("dropout", rate=rate)

    @classmethod
    def embedding(cls, vocab, dim):
        return cls("embedding", vocab, dim)


def mlp_chain(n_in, hidden=(100, 50, 25, 12), n_out=1, dropout=0.25):
    """Dense ReLU layers each followed by dropout, then a linear output layer."""
    chain, width = [], n_in
    for h in hidden:
        chain.append(LayerSpec.dense(width, h, "relu"))
        if dropout > 0:
            chain.append(LayerSpec.dropout(dropout))
        width = h
    chain.append(LayerSpec.dense(width, n_out, "linear"))
    return chain


def init_params(chain, rng, prefix=""):
    """Glorot-uniform weights, zero biases, U(-0.05, 0.05) embedding tables."""
    params = {}
    for i, layer in enumerate(chain):
        if layer.kind == "dense":
            limit = np.sqrt(6.0 / (layer.n_in + layer.n_out))
            params["%sW%d" % (prefix, i)] = rng.uniform(-limit, limit, (layer.n_in, layer.n_out))
            params["%sb%d" % (prefix, i)] = np.zeros(layer.n_out)
        elif layer.kind == "embedding":
            params["%sE%d" % (prefix, i)] = rng.uniform(-0.05, 0.05, (layer.n_in, layer.n_out))
    return params


def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range [0, %d)" % table.shape[0])
    return table[ids]


def embedding_backward(shape, ids, grad):
    """Table gradient: rows of ``grad`` accumulated into the ids they came from."""
    out = np.zeros(shape)
    np.add.at(out, np.asarray(ids), grad)
    return out


def forward(params, chain, X, training=False, rng=None, prefix=""):
    """Run ``X`` through ``chain``. Returns ``(output, cache)``.

    Dropout draws from ``rng`` only when ``training`` is true.
    """
    h = X if chain and chain[0].kind == "embedding" else np.asarray(X, dtype=float)
    cache = []
    for i, layer in enumerate(chain):
        if layer.kind == "dense":
            W = params["%sW%d" % (prefix, i)]
            if h.ndim != 2 or h.shape[1] != W.shape[0]:
                raise ValueError("layer %d expects width %d, got input of shape %s"
                                 % (i, W.shape[0], h.shape))
            z = h @ W + params["%sb%d" % (prefix, i)]
            out = np.maximum(z, 0.0) if layer.activation == "relu" else z
            cache.append((h, z))
            h = out
        elif layer.kind == "dropout":
            if training and layer.rate > 0:
                mask = (rng.random(h.shape) >= layer.rate) / (1.0 - layer.rate)
                cache.append(mask)
                h = h * mask
            else:
                cache.append(None)
        else:
            cache.append(h)
            h = embedding_lookup(params["%sE%d" % (prefix, i)], h)
    return h, cache


def backward(params, chain, cache, grad_out, prefix=""):
    """Gradients of a scalar loss given ``d loss / d output``.

    Returns ``(param_grads, grad_wrt_input)``; the input gradient is
    ``None`` when the chain starts with an embedding layer.
    """
    if len(cache) != len(chain):
        raise ValueError("cache does not match the layer chain")
    grads = {}
    g = np.asarray(grad_out, dtype=float)
    for i in range(len(chain) - 1, -1, -1):
        layer, c = chain[i], cache[i]
        if layer.kind == "dense":
            h, z = c
            if g.shape != z.shape:
                raise ValueError("stale cache: gradient shape %s vs activation %s"
                                 % (g.shape, z.shape))
            if layer.activation == "relu":
                g = g * (z > 0)
            W = params["%sW%d" % (prefix, i)]
            grads["%sW%d" % (prefix, i)] = h.T @ g
            grads["%sb%d" % (prefix, i)] = g.sum(axis=0)
            g = g @ W.T
        elif layer.kind == "dropout":
            if c is not None:
                g = g * c
        else:
            key = "%sE%d" % (prefix, i)
            grads[key] = embedding_backward(params[key].shape, c, g)
            g = None
    return grads, g


class FeedForward:
    """An MLP over ``[X, emb_1(ids_1), ..., emb_k(ids_k)]``.

    ``embeddings`` is a sequence of ``(vocab, dim)`` pairs, one per id column
    passed to :meth:`forward`.
    """

    def __init__(self, n_features, hidden=(100, 50, 25, 12), n_out=1, dropout=0.25,
                 embeddings=(), rng=None):
        rng = np.random.default_rng(rng)
        self.embeddings = tuple((int(q), int(d)) for q, d in embeddings)
        self.n_features = n_features
        width = n_features + sum(d for _, d in self.embeddings)
        self.chain = mlp_chain(width, hidden, n_out, dropout)
        self.params = init_params(self.chain, rng)
        for k, (q, d) in enumerate(self.embeddings):
            self.params["emb%d" % k] = rng.uniform(-0.05, 0.05, (q, d))

    def forward(self, X, ids=None, training=False, rng=None):
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features:
            raise ValueError("expected %d features, got %d" % (self.n_features, X.shape[1]))
        parts = [X]
        if self.embeddings:
            ids = np.asarray(ids).reshape(X.shape[0], -1)
            parts += [embedding_lookup(self.params["emb%d" % k], ids[:, k])
                      for k in range(len(self.embeddings))]
        out, cache = forward(self.params, self.chain, np.hstack(parts) if len(parts) > 1 else X,
                             training, rng)
        return out, (cache, ids)

    def backward(self, cache, grad_out):
        chain_cache, ids = cache
        grads, g_in = backward(self.params, self.chain, chain_cache, grad_out)
        start = self.n_features
        for k, (q, d) in enumerate(self.embeddings):
            grads["emb%d" % k] = embedding_backward((q, d), ids[:, k], g_in[:, start:start + d])
            start += d
        return grads

    def predict(self, X, ids=None):
        return self.forward(X, ids)[0]


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        _check_finite(grads)
        for k, g in grads.items():
            params[k] -= self.lr * g
        self.t += 1
        return params


class Adam:
    """Bias-corrected Adam with betas (0.9, 0.999) and eps 1e-8."""

    def __init__(self, lr=1e-3):
        self.lr = lr
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        _check_finite(grads)
        self.t += 1
        b1, b2 = ADAM_BETAS
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        return params


def make_optimizer(name="adam", lr=1e-3):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError("unknown optimizer %r" % name)


def _check_finite(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient for parameter %r" % k)


@dataclass(frozen=True)
class NetConfig:
    """Architecture of ``f`` (and of a learned ``g`` where one is used)."""

    hidden: tuple = (100, 50, 25, 12)
    dropout: float = 0.25
    g_hidden: tuple = (64, 64)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for key in ("hidden", "g_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class EmbeddingMap:
    """``g(Z)`` as a plain lookup table: level id -> ``dim`` learned columns."""

    def __init__(self, vocab, dim, rng=None):
        rng = np.random.default_rng(rng)
        self.params = {"table": rng.uniform(-0.05, 0.05, (vocab, dim))}

    def forward(self, ids, training=False, rng=None):
        ids = np.asarray(ids)
        return embedding_lookup(self.params["table"], ids), ids

    def backward(self, cache, grad_out):
        return {"table": embedding_backward(self.params["table"].shape, cache, grad_out)}
