"""Synthetic mixed-effects datasets.

Every random component draws from its own named stream derived from the
master seed, so adding draws to one component never shifts another::

    X, sizes, b, eps, W, locations, split, response

Scenarios: ``single-categorical``, ``multiple-categorical``,
``longitudinal``, ``spatial``, ``combined`` and ``glmm-binary``.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .covariance import (Combined, CovarianceSpec, Longitudinal, MultipleCategorical,
                         RandomIntercepts, REDesignData, SpatialRBF, VarianceComponents,
                         longitudinal_cov, rbf_kernel)

SCENARIOS = ("single-categorical", "multiple-categorical", "longitudinal", "spatial",
             "combined", "glmm-binary")
G_MODES = ("identity", "linear-W", "nonlinear-W")
TEST_FRACTION = 0.2
POISSON_MEAN = 30
STREAMS = {"X": 0, "sizes": 1, "b": 2, "eps": 3, "W": 4, "locations": 5, "split": 6,
           "response": 7}


def stream(seed, name, *sub):
    """Independent generator for one named component of a dataset."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],) + sub))


@dataclass(frozen=True)
class SimSpec:
    scenario: str = "single-categorical"
    n: int = 10000
    p: int = 10
    qs: tuple = (100,)
    sig2e: float = 1.0
    sig2bs: tuple = (1.0,)
    rhos: tuple = (0.3, 0.3)
    rho_pairs: tuple = ((0, 1), (0, 2))
    g_mode: str = "identity"
    split_mode: str = "random"
    f_mode: str = "nonlinear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "qs", tuple(int(q) for q in np.atleast_1d(self.qs)))
        object.__setattr__(self, "sig2bs", tuple(float(s) for s in np.atleast_1d(self.sig2bs)))
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))
        object.__setattr__(self, "rho_pairs", tuple(tuple(int(v) for v in pr)
                                                    for pr in self.rho_pairs))
        self.validate()

    def validate(self):
        s = self.scenario
        if s not in SCENARIOS:
            raise ValueError("unknown scenario %r" % s)
        if self.g_mode not in G_MODES:
            raise ValueError("unknown g_mode %r" % self.g_mode)
        if self.split_mode not in ("random", "future"):
            raise ValueError("unknown split_mode %r" % self.split_mode)
        if self.f_mode not in ("nonlinear", "linear", "zero"):
            raise ValueError("unknown f_mode %r" % self.f_mode)
        if self.p < 2:
            raise ValueError("need p >= 2 fixed features")
        if self.split_mode == "future" and s != "longitudinal":
            raise ValueError("future split is only defined for longitudinal data")
        if self.g_mode != "identity" and s not in ("single-categorical", "multiple-categorical"):
            raise ValueError("g_mode %r is only defined for categorical scenarios" % self.g_mode)
        if self.sig2e < 0 or any(v < 0 for v in self.sig2bs):
            raise ValueError("variances must be non-negative")
        expected = {"single-categorical": (1, 1), "glmm-binary": (1, 1),
                    "multiple-categorical": (len(self.qs), len(self.qs)),
                    "longitudinal": (1, None), "spatial": (1, 2), "combined": (3, 4)}[s]
        if len(self.qs) != expected[0]:
            raise ValueError("scenario %s needs %d q values, got %d" % (s, expected[0], len(self.qs)))
        if expected[1] is not None and len(self.sig2bs) != expected[1]:
            raise ValueError("scenario %s needs %d variances, got %d"
                             % (s, expected[1], len(self.sig2bs)))
        if s == "longitudinal" and len(self.rhos) != len(self.rho_pairs):
            raise ValueError("one correlation per declared pair is required")
        if min(self.qs) < 1:
            raise ValueError("q must be >= 1")
        categorical_q = self.qs if s != "combined" else self.qs[:2]
        if s != "spatial" and self.n < max(categorical_q):
            raise ValueError("n must be >= q for categorical scenarios")
        if s in ("longitudinal", "spatial", "combined") and self.n < self.qs[-1]:
            raise ValueError("n must be >= the number of subjects/locations")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def cov_spec(self):
        """The covariance structure a correctly specified model would fit."""
        s, qs = self.scenario, self.qs
        if s in ("single-categorical", "glmm-binary"):
            kind = RandomIntercepts(qs[0])
        elif s == "multiple-categorical":
            kind = MultipleCategorical(qs)
        elif s == "longitudinal":
            kind = Longitudinal(qs[0], len(self.sig2bs), self.rho_pairs)
        elif s == "spatial":
            kind = SpatialRBF(qs[0])
        else:
            kind = Combined((RandomIntercepts(qs[0]), RandomIntercepts(qs[1]), SpatialRBF(qs[2])))
        return CovarianceSpec(kind)

    def true_theta(self):
        rhos = self.rhos if self.scenario == "longitudinal" else ()
        return VarianceComponents(max(self.sig2e, 1e-300), self.sig2bs, rhos)


@dataclass
class MixedDataset:
    X: np.ndarray
    y: np.ndarray
    re: REDesignData
    train_idx: np.ndarray
    test_idx: np.ndarray
    sim: Optional[SimSpec] = None
    truth: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.y.size

    @property
    def scenario(self):
        return self.sim.scenario

    def cov_spec(self):
        return self.sim.cov_spec()

    def part(self, which):
        rows = self.train_idx if which == "train" else self.test_idx
        return self.X[rows], self.y[rows], self.re.take(rows)

    def with_split(self, train_idx, test_idx):
        return MixedDataset(self.X, self.y, self.re, np.asarray(train_idx), np.asarray(test_idx),
                            self.sim, self.truth)


# --------------------------------------------------------------------------
# building blocks


def f_true(X):
    """``s cos(s) + 2 X_1 X_2`` with ``s`` the row sum over all columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("X needs at least 2 columns")
    s = X.sum(axis=1)
    return s * np.cos(s) + 2.0 * X[:, 0] * X[:, 1]


def f_linear(X):
    return np.asarray(X, dtype=float).sum(axis=1)


_F = {"nonlinear": f_true, "linear": f_linear, "zero": lambda X: np.zeros(X.shape[0])}


def sample_cluster_sizes(n, q, seed, sub=0):
    """Assign ``n`` rows to ``q`` levels with Poisson(30)-weighted multinomial sizes.

    Returns ``(ids, counts)``; ``ids`` is a random permutation of the
    repeated level labels.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    rng = stream(seed, "sizes", sub)
    for _ in range(2):
        lam = rng.poisson(POISSON_MEAN, q).astype(float)
        if lam.sum() > 0:
            break
    else:
        raise RuntimeError("all Poisson draws were zero twice")
    counts = rng.multinomial(n, lam / lam.sum())
    ids = rng.permutation(np.repeat(np.arange(q), counts))
    return ids, counts


def uniform_sizes(n, q, rng):
    """``q`` counts uniform on ``{1..M}`` with ``M`` set so the expected total is ``n``,
    then nudged to sum to exactly ``n`` while staying in ``[1, M]``."""
    if n < q:
        raise ValueError("n must be >= q")
    M = max(1, int(round(2.0 * n / q - 1.0)))
    while q * M < n:
        M += 1
    counts = rng.integers(1, M + 1, q)
    diff = n - counts.sum()
    while diff != 0:
        j = rng.integers(q)
        if diff > 0 and counts[j] < M:
            counts[j] += 1
            diff -= 1
        elif diff < 0 and counts[j] > 1:
            counts[j] -= 1
            diff += 1
    return counts


def sample_W(q, rng):
    d = int(0.1 * q)
    if d < 1:
        raise ValueError("W modes need q >= 10 (d = 0.1 q >= 1)")
    return rng.uniform(-1.0, 1.0, (q, d))


def apply_g(Z, g_mode, W=None, seed=None):
    """Transform the one-hot design: identity, ``Z W`` or ``(Z W) * cos(Z W)``."""
    if g_mode == "identity":
        return Z
    if g_mode not in G_MODES:
        raise ValueError("unknown g_mode %r" % g_mode)
    if W is None:
        W = sample_W(Z.shape[1], stream(seed, "W"))
    ZW = np.asarray(Z @ W)
    return ZW if g_mode == "linear-W" else ZW * np.cos(ZW)


def one_hot(ids, q):
    ids = np.asarray(ids)
    return sp.csr_matrix((np.ones(ids.size), (np.arange(ids.size), ids)), shape=(ids.size, q))


def _time_grid(counts):
    grid = np.linspace(0.0, 1.0, int(counts.max())) if counts.max() > 1 else np.zeros(1)
    subj = np.repeat(np.arange(counts.size), counts)
    step = np.concatenate([np.arange(c) for c in counts])
    return subj, grid[step]


def draw_spatial_b(coords, sig2b0, sig2b1, rng):
    """One draw of location effects via Cholesky of ``D + 1e-10 I``."""
    q = coords.shape[0]
    if sig2b0 == 0:
        return np.zeros(q)
    D = rbf_kernel(coords, sig2b0, sig2b1) + 1e-10 * np.eye(q)
    return np.linalg.cholesky(D) @ rng.standard_normal(q)


def _split(n, rng, times=None):
    n_test = int(round(TEST_FRACTION * n))
    perm = rng.permutation(n)
    if times is None:
        test = perm[:n_test]
    else:
        order = perm[np.argsort(times[perm], kind="stable")]
        test = order[n - n_test:]
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    return np.nonzero(~mask)[0], np.nonzero(mask)[0]


# --------------------------------------------------------------------------
# generator


def gen(spec):
    """Draw one dataset; ground truth is kept in ``dataset.truth``."""
    if isinstance(spec, dict):
        spec = SimSpec.from_dict(spec)
    s, n, seed = spec.scenario, spec.n, spec.seed
    X = stream(seed, "X").uniform(-1.0, 1.0, (n, spec.p))
    f = _F[spec.f_mode](X)
    rng_b = stream(seed, "b")
    truth = {"f": f, "theta": spec.true_theta().as_dict(spec.cov_spec()), "seed": seed}
    times = coords = None

    if s in ("single-categorical", "glmm-binary", "multiple-categorical"):
        cols = [sample_cluster_sizes(n, q, seed, k)[0] for k, q in enumerate(spec.qs)]
        ids = np.stack(cols, axis=1)
        if spec.g_mode == "identity":
            bs = [np.sqrt(v) * rng_b.standard_normal(q) for v, q in zip(spec.sig2bs, spec.qs)]
            re_part = sum(b[ids[:, k]] for k, b in enumerate(bs))
            truth["b"] = bs
        else:
            Z = sp.hstack([one_hot(ids[:, k], q) for k, q in enumerate(spec.qs)]).tocsr()
            W = sample_W(Z.shape[1], stream(seed, "W"))
            G = apply_g(Z, spec.g_mode, W)
            # W's output columns are split evenly across features, one variance each
            blocks = np.array_split(np.arange(W.shape[1]), len(spec.qs))
            scale = np.concatenate([np.full(c.size, np.sqrt(v))
                                    for c, v in zip(blocks, spec.sig2bs)])
            b = scale * rng_b.standard_normal(W.shape[1])
            re_part = G @ b
            truth.update(b=[b], W=W)
    elif s == "longitudinal":
        q = spec.qs[0]
        counts = uniform_sizes(n, q, stream(seed, "sizes"))
        subj, times = _time_grid(counts)
        ids = subj[:, None]
        comp = Longitudinal(q, len(spec.sig2bs), spec.rho_pairs)
        C = longitudinal_cov(comp, spec.sig2bs, spec.rhos)
        B = rng_b.multivariate_normal(np.zeros(comp.order), C, size=q, method="cholesky")
        T = times[:, None] ** np.arange(comp.order)[None, :]
        re_part = np.sum(B[subj] * T, axis=1)
        truth["b"] = [B]
    elif s == "spatial":
        q = spec.qs[0]
        coords = stream(seed, "locations").uniform(-10.0, 10.0, (q, 2))
        rng_s = stream(seed, "sizes")
        counts = uniform_sizes(n, q, rng_s)
        ids = rng_s.permutation(np.repeat(np.arange(q), counts))[:, None]
        b = draw_spatial_b(coords, spec.sig2bs[0], spec.sig2bs[1], rng_b)
        re_part = b[ids[:, 0]]
        truth["b"] = [b]
    else:  # combined
        q1, q2, q3 = spec.qs
        id1 = sample_cluster_sizes(n, q1, seed, 0)[0]
        id2 = sample_cluster_sizes(n, q2, seed, 1)[0]
        coords = stream(seed, "locations").uniform(-10.0, 10.0, (q3, 2))
        rng_s = stream(seed, "sizes", 2)
        loc = rng_s.permutation(np.repeat(np.arange(q3), uniform_sizes(n, q3, rng_s)))
        ids = np.stack([id1, id2, loc], axis=1)
        b1 = np.sqrt(spec.sig2bs[0]) * rng_b.standard_normal(q1)
        b2 = np.sqrt(spec.sig2bs[1]) * rng_b.standard_normal(q2)
        d = draw_spatial_b(coords, spec.sig2bs[2], spec.sig2bs[3], rng_b)
        re_part = b1[id1] + b2[id2] + d[loc]
        truth["b"] = [b1, b2, d]

    if s == "glmm-binary":
        u = stream(seed, "response").random(n)
        eta = f + re_part
        y = (u < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        truth["eps"] = u
    else:
        eps = np.sqrt(spec.sig2e) * stream(seed, "eps").standard_normal(n)
        y = f + re_part + eps
        truth["eps"] = eps
    truth["re_part"] = re_part
    re = REDesignData(ids, times, coords)
    train_idx, test_idx = _split(n, stream(seed, "split"),
                                 times if spec.split_mode == "future" else None)
    return MixedDataset(X, y, re, train_idx, test_idx, spec, truth)


def reconstruct_y(ds):
    """Rebuild ``y`` from the recorded truth and design (for recoverability checks)."""
    spec, t, ids = ds.sim, ds.truth, ds.re.ids
    f = _F[spec.f_mode](ds.X)
    s = spec.scenario
    if "W" in t:
        Z = sp.hstack([one_hot(ids[:, k], q) for k, q in enumerate(spec.qs)]).tocsr()
        re_part = apply_g(Z, spec.g_mode, t["W"]) @ t["b"][0]
    elif s == "longitudinal":
        B = t["b"][0]
        T = ds.re.times[:, None] ** np.arange(B.shape[1])[None, :]
        re_part = np.sum(B[ids[:, 0]] * T, axis=1)
    else:
        re_part = sum(b[ids[:, k]] for k, b in enumerate(t["b"]))
    if s == "glmm-binary":
        return (t["eps"] < 1.0 / (1.0 + np.exp(-(f + re_part)))).astype(float)
    return f + re_part + t["eps"]


# --------------------------------------------------------------------------
# CSV interchange


def _scenario_columns(scenario, n_ids):
    if scenario in ("single-categorical", "glmm-binary"):
        return ["z_id"]
    if scenario == "multiple-categorical":
        return ["z_id_%d" % k for k in range(n_ids)]
    if scenario == "longitudinal":
        return ["z_id", "t"]
    if scenario == "spatial":
        return ["z_id", "lat", "lon"]
    return ["z_id_0", "z_id_1", "z_id_2", "lat", "lon"]


def to_frame(ds):
    frame = pd.DataFrame(ds.X, columns=["X_%d" % j for j in range(ds.X.shape[1])])
    cols = _scenario_columns(ds.scenario, ds.re.ids.shape[1])
    id_cols = [c for c in cols if c.startswith("z_id")]
    for k, c in enumerate(id_cols):
        frame[c] = ds.re.ids[:, k]
    if "t" in cols:
        frame["t"] = ds.re.times
    if "lat" in cols:
        pts = ds.re.coords[ds.re.ids[:, -1]]
        frame["lat"], frame["lon"] = pts[:, 0], pts[:, 1]
    frame["y"] = ds.y
    return frame


def write_dataset(ds, path):
    """Write ``path`` (CSV) and ``path.json`` (spec, truth theta, split, coordinates)."""
    path = Path(path)
    to_frame(ds).to_csv(path, index=False, float_format="%.17g")
    side = {"sim_spec": ds.sim.to_dict(), "theta": ds.truth.get("theta"),
            "seed": ds.sim.seed, "test_idx": ds.test_idx.tolist(),
            "coords": None if ds.re.coords is None else ds.re.coords.tolist()}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1))
    return path


def read_dataset(path):
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    sim = SimSpec.from_dict(side["sim_spec"])
    frame = pd.read_csv(path, float_precision="round_trip")
    X = frame[[c for c in frame.columns if c.startswith("X_")]].to_numpy(float)
    ids = frame[[c for c in frame.columns if c.startswith("z_id")]].to_numpy(np.int64)
    times = frame["t"].to_numpy(float) if "t" in frame else None
    coords = None if side.get("coords") is None else np.asarray(side["coords"], dtype=float)
    test = np.asarray(side["test_idx"], dtype=np.int64)
    mask = np.zeros(len(frame), dtype=bool)
    mask[test] = True
    truth = {"theta": side.get("theta"), "seed": side.get("seed")}
    return MixedDataset(X, frame["y"].to_numpy(float), REDesignData(ids, times, coords),
                        np.nonzero(~mask)[0], np.sort(test), sim, truth)
