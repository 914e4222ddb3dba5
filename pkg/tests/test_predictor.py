import numpy as np
import pandas as pd
import pytest

from lmmnn.covariance import (Longitudinal, RandomIntercepts, REDesignData, SpatialRBF,
                              VarianceComponents, build_D, build_Z, marginal_V)
from lmmnn.predictor import (FittedModel, blup, blup_intercepts_fast, mean_se, mse, predict,
                             subsample_blup, write_blup, write_predictions)
from instances import KIND_NAMES, instance


def _zero_f(X):
    return np.zeros(len(X))


def _fitted(spec, th, data, e):
    return FittedModel(spec, th, data, e, fixed_fn=_zero_f)


def _oracle(spec, th, data, e):
    Z = build_Z(spec, data).toarray()
    V = marginal_V(spec, th, Z, data=data)
    return build_D(spec, th, data) @ Z.T @ np.linalg.inv(V) @ e


# blup

def test_zero_variance_gives_zero():
    data = REDesignData([0, 1, 1])
    b = blup(_fitted(RandomIntercepts(3), VarianceComponents(1.0, (0.0,)), data, [1.0, 2, 3]))
    assert np.array_equal(b, np.zeros(3))


@pytest.mark.parametrize("seed", range(10))
def test_intercepts_fast_matches_general(seed):
    rng = np.random.default_rng(seed)
    n, q = int(rng.integers(50, 501)), int(rng.integers(5, 51))
    data = REDesignData(rng.integers(0, q, n))
    th = VarianceComponents(rng.uniform(0.1, 3), (rng.uniform(0.1, 3),))
    e = rng.standard_normal(n) * 2
    fast = blup_intercepts_fast(e, data.ids, q, th)
    assert np.max(np.abs(blup(_fitted(RandomIntercepts(q), th, data, e)) - fast)) <= 1e-8


def test_spatial_n30_vs_explicit_inverse():
    spec, th, data = instance("spatial", 30, 7)
    e = np.random.default_rng(7).standard_normal(30)
    assert np.max(np.abs(blup(_fitted(spec, th, data, e)) - _oracle(spec, th, data, e))) <= 1e-8


@pytest.mark.parametrize("name", KIND_NAMES)
@pytest.mark.parametrize("seed", range(3))
def test_routes_agree_with_oracle(name, seed):
    spec, th, data = instance(name, 40, seed)
    e = np.random.default_rng(seed).standard_normal(40)
    fit = _fitted(spec, th, data, e)
    oracle = _oracle(spec, th, data, e)
    methods = ["auto", "qspace", "dense"]
    if name in ("intercepts", "longitudinal"):
        methods.append("block")
    for m in methods:
        assert np.max(np.abs(blup(fit, method=m) - oracle)) <= 1e-8, m


def test_block_route_refused_for_dense_covariance():
    spec, th, data = instance("spatial", 10, 0)
    with pytest.raises(ValueError):
        blup(_fitted(spec, th, data, np.zeros(10)), method="block")
    with pytest.raises(ValueError):
        blup(_fitted(spec, th, data, np.zeros(10)), method="nope")


# blup_intercepts_fast

def test_fast_example_1_6():
    th = VarianceComponents(1.0, (1.0,))
    b = blup_intercepts_fast(np.full(4, 2.0), np.zeros(4, int), 2, th)
    assert np.isclose(b[0], 1.6, atol=1e-15) and b[1] == 0.0


def test_fast_large_variance_limit():
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 6, 60)
    e = rng.standard_normal(60)
    b = blup_intercepts_fast(e, ids, 6, VarianceComponents(1.0, (1e12,)))
    means = np.bincount(ids, weights=e, minlength=6) / np.bincount(ids, minlength=6)
    assert np.max(np.abs(b - means)) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_property_shrinkage(seed):
    rng = np.random.default_rng(seed)
    q = int(rng.integers(2, 20))
    ids = rng.integers(0, q, int(rng.integers(2, 100)))
    e = rng.standard_normal(ids.size) * rng.uniform(0.1, 10)
    th = VarianceComponents(rng.uniform(1e-3, 10), (rng.uniform(1e-3, 10),))
    b = blup_intercepts_fast(e, ids, q, th)
    counts = np.bincount(ids, minlength=q)
    means = np.where(counts > 0, np.bincount(ids, weights=e, minlength=q) / np.maximum(counts, 1), 0)
    assert np.all(np.abs(b) <= np.abs(means) + 1e-15)


# predict

def test_predict_unseen_levels_fixed_part_only():
    data = REDesignData([0, 0, 1])
    fit = FittedModel(RandomIntercepts(2), VarianceComponents(1.0, (1.0,)), data,
                      [1.0, 1.0, -1.0], fixed_fn=lambda X: X[:, 0])
    X = np.array([[0.5], [2.0]])
    assert np.array_equal(predict(fit, X, REDesignData([5, 7])), X[:, 0])


def test_predict_single_cluster_constant_residual():
    data = REDesignData(np.zeros(20, int))
    fit = FittedModel(RandomIntercepts(1), VarianceComponents(1.0, (1e10,)), data,
                      np.full(20, 3.0), fixed_fn=lambda X: X[:, 0])
    assert np.isclose(predict(fit, np.array([[1.0]]), REDesignData([0]))[0], 4.0, atol=1e-6)


def test_predict_longitudinal_polynomial():
    spec, th, data = instance("longitudinal", 40, 3)
    e = np.random.default_rng(3).standard_normal(40)
    fit = _fitted(spec, th, data, e)
    b = blup(fit)
    q, t = spec.kind.q, 0.7
    y = predict(fit, np.zeros((1, 1)), REDesignData([2], times=[t]))[0]
    assert np.isclose(y, b[2] + b[q + 2] * t + b[2 * q + 2] * t ** 2, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_spatial_interpolation_limit(seed):
    rng = np.random.default_rng(seed)
    q = 30
    coords = rng.uniform(-1, 1, (q, 2))
    data = REDesignData(np.arange(q), coords=coords)
    th = VarianceComponents(1e-4, (1e3, 0.5))
    V = marginal_V(SpatialRBF(q), th, build_Z(SpatialRBF(q), data), data=data)
    e = np.linalg.cholesky(V) @ rng.standard_normal(q)
    fit = _fitted(SpatialRBF(q), th, data, e)
    assert mse(e, predict(fit, np.zeros((q, 1)), data)) <= 10 * th.sig2e


# subsample_blup

def _intercepts_case(seed, n=400, q=20):
    rng = np.random.default_rng(seed)
    data = REDesignData(rng.integers(0, q, n))
    b = rng.normal(0, 1, q)
    e = b[data.ids[:, 0]] + rng.normal(0, 1, n)
    return _fitted(RandomIntercepts(q), VarianceComponents(1.0, (1.0,)), data, e), b


def test_subsample_full_size_equals_blup():
    fit, _ = _intercepts_case(0, n=120)
    assert np.max(np.abs(subsample_blup(fit, 120, seed=3) - blup(fit, method="dense"))) <= 1e-12


def test_subsample_degenerate_and_errors():
    fit, _ = _intercepts_case(0, n=50)
    assert np.all(np.isfinite(subsample_blup(fit, 2, seed=0)))
    with pytest.raises(ValueError):
        subsample_blup(fit, 1)
    with pytest.raises(ValueError):
        subsample_blup(fit, 51)


def test_subsample_is_deterministic():
    fit, _ = _intercepts_case(1, n=100)
    assert np.array_equal(subsample_blup(fit, 40, seed=9), subsample_blup(fit, 40, seed=9))


def test_subsample_error_decreases_with_size():
    n, monotone = 400, 0
    for seed in range(5):
        fit, _ = _intercepts_case(seed, n=n)
        full = blup(fit, method="dense")
        errs = [np.linalg.norm(subsample_blup(fit, s, seed=seed) - full)
                for s in (n // 8, n // 4, n // 2, n)]
        monotone += all(a > b for a, b in zip(errs, errs[1:]))
    assert monotone >= 4


@pytest.mark.slow
def test_subsample_seed_stability_on_test_mse():
    rng = np.random.default_rng(0)
    n, q = 5000, 100
    ids = rng.integers(0, q, n + 1000)
    b = rng.normal(0, 1, q)
    y = b[ids] + rng.normal(0, 1, ids.size)
    fit = _fitted(RandomIntercepts(q), VarianceComponents(1.0, (1.0,)),
                  REDesignData(ids[:n]), y[:n])
    te = REDesignData(ids[n:])
    mses = []
    for seed in (1, 2):
        fit.b_hat = subsample_blup(fit, 2000, seed=seed)
        mses.append(mse(y[n:], predict(fit, np.zeros((1000, 1)), te)))
    assert abs(mses[0] - mses[1]) / min(mses) <= 0.05


# mse, mean_se, exports

def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])


def test_mean_se_examples():
    assert mean_se([1, 1, 1, 1, 1]) == (1.0, 0.0)
    m, se = mean_se([1.0, 3.0])
    assert m == 2.0 and np.isclose(se, 1.0)
    assert np.isnan(mean_se([4.0])[1])


def test_fitted_model_residual_length():
    with pytest.raises(ValueError):
        FittedModel(RandomIntercepts(2), VarianceComponents(1, (1,)), REDesignData([0, 1]), [1.0])


def test_exports(tmp_path):
    write_predictions(tmp_path / "p.csv", [1.0, 2.0], [1.5, 2.5], [7, 9])
    write_blup(tmp_path / "b.csv", [0.1, -0.2])
    p = pd.read_csv(tmp_path / "p.csv")
    b = pd.read_csv(tmp_path / "b.csv")
    assert list(p.columns) == ["row_id", "y_true", "y_pred"] and p["row_id"].tolist() == [7, 9]
    assert list(b.columns) == ["level_id", "b_hat"] and b["b_hat"].tolist() == [0.1, -0.2]
