"""Random small instances of every covariance kind, shared by the tests."""

import numpy as np

from lmmnn.covariance import (Combined, CovarianceSpec, Longitudinal, MultipleCategorical,
                              RandomIntercepts, REDesignData, SpatialRBF, VarianceComponents)

KIND_NAMES = ("intercepts", "multiple", "longitudinal", "spatial", "combined")


def make_spec(name):
    return CovarianceSpec({
        "intercepts": RandomIntercepts(5),
        "multiple": MultipleCategorical((4, 3)),
        "longitudinal": Longitudinal(6, 3, ((0, 1), (0, 2))),
        "spatial": SpatialRBF(8),
        "combined": Combined((RandomIntercepts(4), RandomIntercepts(3), SpatialRBF(5))),
    }[name])


def random_theta(spec, rng):
    return VarianceComponents(rng.uniform(0.3, 2.0),
                              tuple(rng.uniform(0.3, 2.0, len(spec.psi_names))),
                              tuple(rng.uniform(-0.4, 0.4, len(spec.rho_names))))


def random_data(spec, m, rng, sort=False):
    """Ids, times and coordinates for ``m`` rows of ``spec``."""
    cols, times, coords = [], None, None
    for comp, *_ in spec.components():
        if isinstance(comp, MultipleCategorical):
            cols += [rng.integers(0, q, m) for q in comp.qs]
        else:
            cols.append(rng.integers(0, comp.q, m))
        if isinstance(comp, Longitudinal):
            times = rng.uniform(0.0, 1.0, m)
        if isinstance(comp, SpatialRBF):
            coords = rng.uniform(-2.0, 2.0, (comp.q, 2))
    ids = np.stack(cols, axis=1)
    if sort:
        order = np.argsort(ids[:, 0], kind="stable")
        ids = ids[order]
        times = None if times is None else times[order]
    return REDesignData(ids, times, coords)


def instance(name, m, seed, sort=False):
    rng = np.random.default_rng(seed)
    spec = make_spec(name)
    return spec, random_theta(spec, rng), random_data(spec, m, rng, sort)


def rel_err(analytic, numeric):
    """Norm-wise relative error ``max|a - n| / max|n|``."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))
