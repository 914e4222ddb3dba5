"""Estimator wrappers with the usual ``fit`` / ``predict`` / ``get_params`` shape.

Random-effect information travels next to ``X`` as ``re``: either an
integer id array (one column per categorical feature) or a
:class:`~lmmnn.covariance.REDesignData` carrying times and coordinates.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .covariance import CovarianceSpec, RandomIntercepts, REDesignData, as_spec
from .glmm import DEFAULT_K, auc, train_glmm
from .neuralnet import FeedForward, NetConfig
from .nll import TrainConfig, fit_loop, g_inputs, split_validation, train
from .predictor import FittedModel, blup, mse, predict as predict_lmm

OHE_CAP = 2000
ENCODINGS = ("ignore", "ohe", "embeddings")


def as_re(re, n=None):
    """Coerce ``re`` to :class:`REDesignData` and check its row count."""
    if re is None:
        raise ValueError("random-effect data (re=...) is required")
    if not isinstance(re, REDesignData):
        re = REDesignData(check_array(np.asarray(re), ensure_2d=False, dtype=np.int64))
    if n is not None and re.n != n:
        raise ValueError("re has %d rows, X has %d" % (re.n, n))
    return re


def embedding_dim(q):
    """``min(100, ceil(q / 10))`` columns per categorical feature."""
    return int(min(100, math.ceil(q / 10)))


class _NetParams:
    """Shared hyper-parameters of every network estimator."""

    def _net_config(self):
        return NetConfig(tuple(self.hidden_layers), self.dropout)

    def _train_config(self):
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           patience=self.patience,
                           validation_fraction=self.validation_fraction,
                           seed=self.random_state, learning_rate=self.learning_rate)


class LMMNNRegressor(_NetParams, RegressorMixin, BaseEstimator):
    """Network ``f(X)`` plus structured random effects, trained by Gaussian NLL.

    Parameters
    ----------
    cov_spec : CovarianceSpec, kind, or None
        Random-effect structure; ``None`` means random intercepts on the
        first id column with ``q`` inferred from the training ids.
    embed_dim : int or None
        When set (random intercepts or spatial only), ``g`` is learned with
        this many output columns instead of being the identity.
    blup_method : str
        Route passed to :func:`lmmnn.predictor.blup`.
    """

    def __init__(self, cov_spec=None, hidden_layers=(100, 50, 25, 12), dropout=0.25,
                 batch_size=100, epochs=500, patience=10, validation_fraction=0.1,
                 learning_rate=1e-3, random_state=0, embed_dim=None, blup_method="auto"):
        self.cov_spec = cov_spec
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.embed_dim = embed_dim
        self.blup_method = blup_method

    def _spec(self, re):
        spec = self.cov_spec
        if spec is None:
            spec = RandomIntercepts(int(re.ids[:, 0].max()) + 1)
        spec = as_spec(spec)
        if self.embed_dim is not None:
            spec = CovarianceSpec(spec.kind, self.embed_dim)
        return spec

    def fit(self, X, y, re=None):
        X, y = check_X_y(X, y, y_numeric=True)
        re = as_re(re, X.shape[0])
        spec = self._spec(re)
        res = train(X, y, re, spec, self._net_config(), self._train_config())
        G = None
        if spec.learned_g:
            G = res.g_net.forward(g_inputs(spec, res.g_net, re))[0]
        resid = y - res.net.predict(X)[:, 0]
        self.fitted_ = FittedModel(spec, res.theta, re, resid, net=res.net, g_net=res.g_net,
                                   G_train=G)
        self.fitted_.b_hat = blup(self.fitted_, self.blup_method, seed=self.random_state or 0)
        self.spec_ = spec
        self.theta_ = res.theta
        self.history_ = res.history
        self.n_epochs_ = res.epochs
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "fitted_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("X has %d features, model was fitted with %d"
                             % (X.shape[1], self.n_features_in_))
        return X

    def transform(self, X):
        """Fixed-effect part ``f_hat(X)`` as a column."""
        return self.fitted_.f_hat(self._check_X(X))[:, None]

    def predict(self, X, re=None):
        X = self._check_X(X)
        return predict_lmm(self.fitted_, X, as_re(re, X.shape[0]))

    def score(self, X, y, re=None):
        """Negative test MSE (larger is better)."""
        return -mse(y, self.predict(X, re))

    @property
    def b_hat_(self):
        check_is_fitted(self, "fitted_")
        return self.fitted_.b_hat


class LMMNNClassifier(_NetParams, ClassifierMixin, BaseEstimator):
    """Binary GLMM network with one random-intercept feature (quadrature NLL)."""

    def __init__(self, q=None, hidden_layers=(100, 50, 25, 12), dropout=0.25, batch_size=100,
                 epochs=500, patience=10, validation_fraction=0.1, learning_rate=1e-3,
                 random_state=0, n_nodes=DEFAULT_K):
        self.q = q
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.n_nodes = n_nodes

    def fit(self, X, y, re=None):
        X, y = check_X_y(X, y)
        ids = as_re(re, X.shape[0]).ids[:, 0]
        q = self.q or int(ids.max()) + 1
        self.classes_ = np.array([0, 1])
        self.result_ = train_glmm(X, y, ids, q, self._net_config(), self._train_config(),
                                  K=self.n_nodes)
        self.sig2b_ = self.result_.sig2b
        self.history_ = self.result_.history
        self.n_epochs_ = self.result_.epochs
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X, re=None):
        check_is_fitted(self, "result_")
        X = check_array(X)
        p = self.result_.predict_proba(X, as_re(re, X.shape[0]).ids[:, 0])
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X, re=None):
        return (self.predict_proba(X, re)[:, 1] >= 0.5).astype(int)

    def score(self, X, y, re=None):
        """Test AUC."""
        return auc(self.predict_proba(X, re)[:, 1], y)


class _FixedEffectsNet(_NetParams, BaseEstimator):
    """A network that treats the categorical ids as ordinary inputs (or drops them)."""

    def __init__(self, encoding="ignore", hidden_layers=(100, 50, 25, 12), dropout=0.25,
                 batch_size=100, epochs=500, patience=10, validation_fraction=0.1,
                 learning_rate=1e-3, random_state=0, qs=None, ohe_cap=OHE_CAP):
        self.encoding = encoding
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.qs = qs
        self.ohe_cap = ohe_cap

    def _encode(self, X, ids):
        """Network input for rows ``X`` and the id matrix used by embeddings."""
        if self.encoding != "ohe":
            return X
        parts = [X]
        for k, q in enumerate(self.qs_):
            col = ids[:, k]
            oh = np.zeros((X.shape[0], q))
            ok = (col >= 0) & (col < q)
            oh[np.nonzero(ok)[0], col[ok]] = 1.0
            parts.append(oh)
        return np.hstack(parts)

    def _emb_ids(self, ids):
        # out-of-range ids share the spare last row of each table
        out = ids[:, :len(self.qs_)].copy()
        for k, q in enumerate(self.qs_):
            out[(out[:, k] < 0) | (out[:, k] >= q), k] = q
        return out

    def _fit(self, X, y, re, loss):
        if self.encoding not in ENCODINGS:
            raise ValueError("encoding must be one of %s" % (ENCODINGS,))
        X = check_array(X)
        y = np.asarray(y, dtype=float).ravel()
        ids = None
        self.qs_ = ()
        if self.encoding != "ignore":
            ids = as_re(re, X.shape[0]).ids
            self.qs_ = tuple(self.qs) if self.qs is not None else \
                tuple(int(c.max()) + 1 for c in ids.T)
            if self.encoding == "ohe" and sum(self.qs_) > self.ohe_cap:
                raise ValueError("one-hot width %d exceeds the cap of %d columns"
                                 % (sum(self.qs_), self.ohe_cap))
        net_cfg, cfg = self._net_config(), self._train_config()
        init_ss, split_ss, loop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        emb = [(q + 1, embedding_dim(q)) for q in self.qs_] if self.encoding == "embeddings" else []
        width = X.shape[1] + (sum(self.qs_) if self.encoding == "ohe" else 0)
        net = FeedForward(width, net_cfg.hidden, 1, net_cfg.dropout, embeddings=emb,
                          rng=np.random.default_rng(init_ss))
        emb_ids = self._emb_ids(ids) if emb else None
        train_rows, val_rows = split_validation(y.size, cfg.validation_fraction,
                                                np.random.default_rng(split_ss))

        def objective(params, rows, training, rng):
            Xb = self._encode(X[rows], None if ids is None else ids[rows])
            out, cache = net.forward(Xb, None if emb_ids is None else emb_ids[rows],
                                     training=training, rng=rng)
            value, grad = loss(out[:, 0], y[rows])
            if not training:
                return value, None
            return value, net.backward(cache, grad[:, None])

        self.history_ = fit_loop(net.params, objective, train_rows, val_rows, cfg,
                                 np.random.default_rng(loop_ss),
                                 loss_names=("train_loss", "val_loss"))
        self.net_ = net
        self.n_epochs_ = len(self.history_)
        self.n_features_in_ = X.shape[1]
        return self

    def _raw(self, X, re=None):
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("X has %d features, model was fitted with %d"
                             % (X.shape[1], self.n_features_in_))
        ids = as_re(re, X.shape[0]).ids if self.encoding != "ignore" else None
        emb_ids = self._emb_ids(ids) if self.encoding == "embeddings" else None
        return self.net_.predict(self._encode(X, ids), emb_ids)[:, 0]


def _squared_error(out, y):
    r = out - y
    return float(np.mean(r ** 2)), 2.0 * r / r.size


def _cross_entropy(out, y):
    p = 1.0 / (1.0 + np.exp(-np.clip(out, -30.0, 30.0)))
    value = float(np.mean(np.logaddexp(0.0, out) - y * out))
    return value, (p - y) / y.size


class FixedEffectsRegressor(_FixedEffectsNet, RegressorMixin):
    """Squared-error baseline: ids ignored, one-hot encoded, or embedded."""

    def fit(self, X, y, re=None):
        return self._fit(X, y, re, _squared_error)

    def predict(self, X, re=None):
        return self._raw(X, re)

    def score(self, X, y, re=None):
        return -mse(y, self.predict(X, re))


class FixedEffectsClassifier(_FixedEffectsNet, ClassifierMixin):
    """Cross-entropy baseline for binary responses."""

    def fit(self, X, y, re=None):
        self.classes_ = np.array([0, 1])
        return self._fit(X, y, re, _cross_entropy)

    def predict_proba(self, X, re=None):
        p = 1.0 / (1.0 + np.exp(-np.clip(self._raw(X, re), -30.0, 30.0)))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X, re=None):
        return (self.predict_proba(X, re)[:, 1] >= 0.5).astype(int)

    def score(self, X, y, re=None):
        return auc(self.predict_proba(X, re)[:, 1], y)
