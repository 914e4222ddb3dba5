"""Experiment runner: replications x methods on simulated or loaded data.

Every method in a replication sees the same train/test split. Seeds come
from one master seed: replication ``r`` draws its data from stream
``(r, 0)`` and method ``m`` trains from stream ``(r, 1 + METHODS.index(m))``,
so adding or removing a method leaves the others untouched.
"""

import json
import os
import time
import traceback
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .estimators import (FixedEffectsClassifier, FixedEffectsRegressor, LMMNNClassifier,
                         LMMNNRegressor, embedding_dim)
from .glmm import auc
from .neuralnet import NetConfig
from .nll import TrainConfig
from .predictor import mean_se, mse
from .simgen import SimSpec, _split, gen, read_dataset

METHODS = ("lmmnn", "ignore", "ohe", "embeddings", "lmmnn-e")
OUTPUT_ENV = "LMMNN_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One experiment; field names double as the JSON config keys."""

    sim_spec: Optional[dict] = None
    dataset_path: Optional[str] = None
    methods: tuple = ("lmmnn", "ignore")
    replications: int = 5
    net: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    output_dir: Optional[str] = None

    def __post_init__(self):
        if (self.sim_spec is None) == (self.dataset_path is None):
            raise ConfigError("give exactly one of sim_spec and dataset_path")
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError("unknown methods %s; choose from %s" % (bad, METHODS))
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        if int(self.replications) < 1:
            raise ConfigError("replications must be >= 1")
        if self.sim_spec is not None:
            SimSpec.from_dict(self.sim_spec)
        self.net_config()
        self.train_cfg()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError("unknown config fields: %s" % sorted(unknown))
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d

    def net_config(self):
        return NetConfig.from_dict(self.net)

    def train_cfg(self):
        return TrainConfig.from_dict(self.train_config)

    @property
    def master_seed(self):
        if self.sim_spec is not None:
            return int(SimSpec.from_dict(self.sim_spec).seed)
        return int(self.train_cfg().seed or 0)

    def resolved_output_dir(self):
        return os.environ.get(OUTPUT_ENV) or self.output_dir or "lmmnn-output"


def _seed(master, *key):
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


@dataclass
class ExperimentReport:
    """Raw per-cell rows plus the tables derived from them."""

    results: pd.DataFrame
    theta: pd.DataFrame
    runtime: pd.DataFrame
    histories: dict
    metric: str

    @property
    def all_ok(self):
        return bool(self.results["error"].isna().all())

    def summary(self):
        return summarize(self.results)


def summarize(results):
    """Mean and standard error of the metric per method over successful cells."""
    rows = []
    for method, g in results.groupby("method", sort=False):
        vals = g["metric"].dropna().to_numpy(dtype=float)
        mean, se = mean_se(vals) if vals.size else (np.nan, np.nan)
        rows.append({"method": method, "metric_name": g["metric_name"].iloc[0],
                     "mean": mean, "se": se, "n_ok": int(vals.size), "n_failed": int(len(g) - vals.size)})
    return pd.DataFrame(rows)


def _estimator(method, scenario, cov_spec, net, cfg, seed, qs):
    common = dict(hidden_layers=net.hidden, dropout=net.dropout, batch_size=cfg.batch_size,
                  epochs=cfg.epochs, patience=cfg.patience,
                  validation_fraction=cfg.validation_fraction,
                  learning_rate=cfg.learning_rate, random_state=seed)
    if scenario == "glmm-binary":
        if method == "lmmnn":
            return LMMNNClassifier(q=qs[0], **common)
        if method == "lmmnn-e":
            raise ConfigError("lmmnn-e is not defined for the binary GLMM")
        return FixedEffectsClassifier(method, qs=qs, **common)
    if method == "lmmnn":
        return LMMNNRegressor(cov_spec=cov_spec, **common)
    if method == "lmmnn-e":
        return LMMNNRegressor(cov_spec=cov_spec, embed_dim=embedding_dim(sum(qs)), **common)
    return FixedEffectsRegressor(method, qs=qs, **common)


def level_counts(spec):
    """Number of levels behind each id column of ``spec``."""
    kind = spec.kind
    if hasattr(kind, "qs"):
        return tuple(kind.qs)
    if hasattr(kind, "components"):
        return tuple(q for c in kind.components for q in getattr(c, "qs", (c.q,)))
    return (kind.q,)


def _run_cell(method, ds, config, seed):
    scenario = ds.sim.scenario
    spec = ds.cov_spec()
    est = _estimator(method, scenario, spec, config.net_config(), config.train_cfg(), seed,
                     level_counts(spec))
    (Xtr, ytr, retr), (Xte, yte, rete) = [(ds.X[i], ds.y[i], ds.re.take(i))
                                          for i in (ds.train_idx, ds.test_idx)]
    est.fit(Xtr, ytr, re=retr)
    if scenario == "glmm-binary":
        metric = auc(est.predict_proba(Xte, rete)[:, 1], yte)
    else:
        metric = mse(yte, est.predict(Xte, rete))
    theta = {}
    if hasattr(est, "theta_"):
        theta = dict(zip(est.spec_.param_names, est.theta_.as_vector()))
    elif hasattr(est, "sig2b_"):
        theta = {"sig2b": est.sig2b_}
    return metric, theta, est.n_epochs_, est.history_.to_frame()


def _replication_data(config, r, base=None):
    master = config.master_seed
    if config.sim_spec is not None:
        d = dict(config.sim_spec)
        d["seed"] = _seed(master, r, 0)
        return gen(SimSpec.from_dict(d))
    times = base.re.times if base.sim.split_mode == "future" else None
    tr, te = _split(base.n, np.random.default_rng(_seed(master, r, 0)), times)
    return base.with_split(tr, te)


def run(config, log=None):
    """Train every method on every replication; failures are recorded, not raised."""
    base = read_dataset(config.dataset_path) if config.dataset_path else None
    rows, thetas, runtimes, histories = [], [], [], {}
    metric_name = None
    for r in range(int(config.replications)):
        ds = _replication_data(config, r, base)
        metric_name = "auc" if ds.sim.scenario == "glmm-binary" else "mse"
        for method in config.methods:
            seed = _seed(config.master_seed, r, 1 + METHODS.index(method))
            t0 = time.perf_counter()
            row = {"replication": r, "method": method, "metric_name": metric_name,
                   "metric": np.nan, "epochs": np.nan, "seed": seed, "error": None}
            try:
                metric, theta, epochs, hist = _run_cell(method, ds, config, seed)
                row.update(metric=metric, epochs=epochs)
                if theta:
                    thetas.append({"replication": r, "method": method, **theta})
                histories[(r, method)] = hist
            except Exception as exc:  # a failed cell must not abort the others
                row["error"] = "%s: %s" % (type(exc).__name__, exc)
                if log:
                    log(traceback.format_exc())
            runtimes.append({"replication": r, "method": method,
                             "seconds": time.perf_counter() - t0})
            rows.append(row)
            if log:
                log("rep %d %-10s %s=%s%s" % (r, method, metric_name, row["metric"],
                                              "" if row["error"] is None else "  ERROR " + row["error"]))
    return ExperimentReport(pd.DataFrame(rows), pd.DataFrame(thetas), pd.DataFrame(runtimes),
                            histories, metric_name)


def report_write(report, out_dir):
    """Write results.csv, summary.csv, theta.csv, runtime.csv and history/*.csv."""
    out = Path(out_dir)
    try:
        (out / "history").mkdir(parents=True, exist_ok=True)
        report.results.to_csv(out / "results.csv", index=False)
        report.summary().to_csv(out / "summary.csv", index=False)
        report.theta.to_csv(out / "theta.csv", index=False)
        report.runtime.to_csv(out / "runtime.csv", index=False)
        for (r, method), hist in report.histories.items():
            hist.to_csv(out / "history" / ("rep%d_%s.csv" % (r, method)), index=False)
    except OSError as exc:
        raise OSError("cannot write report to %s: %s" % (out.resolve(), exc)) from exc
    return out
