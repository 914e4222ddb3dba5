"""Random-effects covariance structures.

A :class:`CovarianceSpec` describes which random effects a model carries;
:class:`VarianceComponents` holds their values. From the two we build the
design ``Z``, the prior covariance ``D``, the marginal covariance
``V = g(Z) D g(Z)' + sig2e * I`` and its derivatives with respect to the
unconstrained parameter vector the optimizer sees.

Two routes compute ``V`` for a set of rows:

* :func:`marginal_V` / :func:`dV_dtheta` go through an explicit ``Z`` and ``D``.
* :func:`batch_covariance` works directly from cluster ids, times and
  locations, which is what the training loop calls for every mini-batch.

The test-suite checks the two against each other.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .linalg import as_sparse_design


class InvalidCovariance(ValueError):
    pass


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class RandomIntercepts:
    """One categorical feature with ``q`` levels, ``D = sig2b * I_q``."""

    q: int

    def __post_init__(self):
        if self.q < 1:
            raise InvalidCovariance("q must be >= 1")

    n_id_cols = 1

    @property
    def psi_names(self):
        return ("sig2b",)

    @property
    def rho_names(self):
        return ()

    @property
    def width(self):
        return self.q


@dataclass(frozen=True)
class MultipleCategorical:
    """``K`` uncorrelated categorical features; ``nested`` marks a hierarchy
    whose first feature is the top level."""

    qs: tuple
    nested: bool = False

    def __post_init__(self):
        object.__setattr__(self, "qs", tuple(int(q) for q in self.qs))
        if not self.qs or min(self.qs) < 1:
            raise InvalidCovariance("every q must be >= 1")

    @property
    def n_id_cols(self):
        return len(self.qs)

    @property
    def psi_names(self):
        return tuple("sig2b_%d" % k for k in range(len(self.qs)))

    @property
    def rho_names(self):
        return ()

    @property
    def width(self):
        return sum(self.qs)


@dataclass(frozen=True)
class Longitudinal:
    """Per-subject polynomial in time of degree ``order - 1``.

    ``correlated`` lists the term pairs ``(l, m)`` with a free correlation.
    """

    q: int
    order: int = 3
    correlated: tuple = ()

    def __post_init__(self):
        pairs = tuple(tuple(sorted((int(a), int(b)))) for a, b in self.correlated)
        object.__setattr__(self, "correlated", pairs)
        if self.q < 1:
            raise InvalidCovariance("q must be >= 1")
        if self.order < 1:
            raise InvalidCovariance("polynomial order must be >= 1")
        for l, m in pairs:
            if l == m or m >= self.order or l < 0:
                raise InvalidCovariance("invalid correlated pair (%d, %d) for order %d"
                                        % (l, m, self.order))
        if len(set(pairs)) != len(pairs):
            raise InvalidCovariance("duplicate correlated pair")

    n_id_cols = 1

    @property
    def psi_names(self):
        return tuple("sig2b_%d" % k for k in range(self.order))

    @property
    def rho_names(self):
        return tuple("rho_%d%d" % p for p in self.correlated)

    @property
    def width(self):
        return self.order * self.q


@dataclass(frozen=True)
class SpatialRBF:
    """``q`` locations with a squared-exponential kernel over their coordinates."""

    q: int

    def __post_init__(self):
        if self.q < 1:
            raise InvalidCovariance("q must be >= 1")

    n_id_cols = 1

    @property
    def psi_names(self):
        return ("sig2b_0", "sig2b_1")

    @property
    def rho_names(self):
        return ()

    @property
    def width(self):
        return self.q


@dataclass(frozen=True)
class Combined:
    """Mutually independent components; ``D`` is block-diagonal across them."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise InvalidCovariance("Combined needs at least one component")
        if any(isinstance(c, Combined) for c in comps):
            raise InvalidCovariance("Combined cannot contain Combined")
        if sum(isinstance(c, SpatialRBF) for c in comps) > 1:
            raise InvalidCovariance("at most one spatial component is supported")

    @property
    def n_id_cols(self):
        return sum(c.n_id_cols for c in self.components)

    @property
    def psi_names(self):
        return tuple("c%d.%s" % (i, n) for i, c in enumerate(self.components)
                     for n in c.psi_names)

    @property
    def rho_names(self):
        return tuple("c%d.%s" % (i, n) for i, c in enumerate(self.components)
                     for n in c.rho_names)

    @property
    def width(self):
        return sum(c.width for c in self.components)


KINDS = (RandomIntercepts, MultipleCategorical, Longitudinal, SpatialRBF, Combined)


@dataclass(frozen=True)
class CovarianceSpec:
    """A random-effects structure plus the form of ``g``.

    ``embed_dim=None`` means ``g`` is the identity. An integer means ``g``
    is learned and maps each observation to ``embed_dim`` columns sharing a
    single variance (supported for :class:`RandomIntercepts` and
    :class:`SpatialRBF`).
    """

    kind: object
    embed_dim: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.kind, KINDS):
            raise InvalidCovariance("unknown covariance kind %r" % (self.kind,))
        if self.embed_dim is not None:
            if not isinstance(self.kind, (RandomIntercepts, SpatialRBF)):
                raise InvalidCovariance("learned g is only supported for random intercepts "
                                        "and spatial specs")
            if self.embed_dim < 1:
                raise InvalidCovariance("embed_dim must be >= 1")

    @property
    def learned_g(self):
        return self.embed_dim is not None

    @property
    def psi_names(self):
        return ("sig2b",) if self.learned_g else self.kind.psi_names

    @property
    def rho_names(self):
        return () if self.learned_g else self.kind.rho_names

    @property
    def param_names(self):
        return ("sig2e",) + self.psi_names + self.rho_names

    @property
    def n_params(self):
        return len(self.param_names)

    @property
    def width(self):
        return self.embed_dim if self.learned_g else self.kind.width

    @property
    def n_id_cols(self):
        return self.kind.n_id_cols

    def components(self):
        """Yield ``(component, psi_slice, rho_slice, id_col, z_offset)``.

        Slices index the ``psi`` and ``rhos`` tuples of a
        :class:`VarianceComponents` conforming to this spec.
        """
        comps = self.kind.components if isinstance(self.kind, Combined) else (self.kind,)
        p = r = c = z = 0
        for comp in comps:
            npsi, nrho = len(comp.psi_names), len(comp.rho_names)
            yield comp, slice(p, p + npsi), slice(r, r + nrho), c, z
            p += npsi
            r += nrho
            c += comp.n_id_cols
            z += comp.width


def as_spec(spec):
    return spec if isinstance(spec, CovarianceSpec) else CovarianceSpec(spec)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class VarianceComponents:
    """``theta = [sig2e, psi, rhos]``.

    The optimizer works on ``unconstrained``: log-variances followed by
    atanh-correlations, in the same order.
    """

    sig2e: float
    psi: tuple = ()
    rhos: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sig2e", float(self.sig2e))
        object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        object.__setattr__(self, "rhos", tuple(float(v) for v in self.rhos))
        if not self.sig2e > 0 or any(not v >= 0 for v in self.psi):
            raise InvalidCovariance("variances must be positive (sig2e > 0, psi >= 0)")
        if any(not -1 < r < 1 for r in self.rhos):
            raise InvalidCovariance("correlations must lie in (-1, 1)")

    @property
    def unconstrained(self):
        with np.errstate(divide="ignore"):
            logs = np.log(np.array((self.sig2e,) + self.psi))
        return np.concatenate([logs, np.arctanh(np.array(self.rhos, dtype=float))])

    @classmethod
    def from_unconstrained(cls, u, n_psi):
        u = np.asarray(u, dtype=float)
        return cls(np.exp(u[0]), tuple(np.exp(u[1:1 + n_psi])), tuple(np.tanh(u[1 + n_psi:])))

    def as_vector(self):
        return np.array((self.sig2e,) + self.psi + self.rhos)

    def as_dict(self, spec):
        return dict(zip(as_spec(spec).param_names, self.as_vector()))


def initial_theta(spec, value=1.0):
    spec = as_spec(spec)
    return VarianceComponents(value, (value,) * len(spec.psi_names),
                              (0.0,) * len(spec.rho_names))


def check_theta(spec, theta):
    spec = as_spec(spec)
    if len(theta.psi) != len(spec.psi_names) or len(theta.rhos) != len(spec.rho_names):
        raise InvalidCovariance("theta has %d variances and %d correlations, spec expects %d and %d"
                                % (len(theta.psi), len(theta.rhos),
                                   len(spec.psi_names), len(spec.rho_names)))


# --------------------------------------------------------------------------
# design data


@dataclass
class REDesignData:
    """What ``Z`` is generated from.

    ``ids`` has one integer column per categorical/subject/location feature,
    in the order the CovarianceSpec's components consume them. ``times`` is per
    observation (longitudinal); ``coords`` is the ``(q, 2)`` table of
    location coordinates indexed by the spatial id column.
    """

    ids: np.ndarray
    times: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim == 1:
            ids = ids[:, None]
        self.ids = ids.astype(np.int64)
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)
            if self.times.shape != (self.n,) or not np.all(np.isfinite(self.times)):
                raise ValueError("times must be a finite vector of length n")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float)
            if self.coords.ndim != 2 or not np.all(np.isfinite(self.coords)):
                raise ValueError("coords must be a finite (q, d) array")

    @property
    def n(self):
        return self.ids.shape[0]

    def take(self, rows):
        rows = np.asarray(rows)
        return REDesignData(self.ids[rows],
                            None if self.times is None else self.times[rows],
                            self.coords)


def _check_data(spec, data):
    if data.ids.shape[1] < spec.n_id_cols:
        raise ValueError("spec needs %d id columns, data has %d"
                         % (spec.n_id_cols, data.ids.shape[1]))
    for comp, *_ in spec.components():
        if isinstance(comp, Longitudinal) and data.times is None:
            raise ValueError("longitudinal spec needs observation times")
        if isinstance(comp, SpatialRBF):
            if data.coords is None:
                raise ValueError("spatial spec needs location coordinates")
            if data.coords.shape[0] < comp.q:
                raise ValueError("coords table has %d rows, spec declares q=%d"
                                 % (data.coords.shape[0], comp.q))


def _component_qs(comp):
    return comp.qs if isinstance(comp, MultipleCategorical) else (comp.q,)


def known_mask(spec, data):
    """Rows whose every id is a level declared by the CovarianceSpec."""
    spec = as_spec(spec)
    mask = np.ones(data.n, dtype=bool)
    for comp, _, _, col, _ in spec.components():
        for k, q in enumerate(_component_qs(comp)):
            ids = data.ids[:, col + k]
            mask &= (ids >= 0) & (ids < q)
    return mask


def build_Z(spec, data, rows=None, training=True):
    """Sparse design ``Z`` (identity ``g``) for the given rows.

    Unknown ids raise at training time. With ``training=False`` they give
    an all-zero row for that feature; see :func:`known_mask` for flagging.
    """
    spec = as_spec(spec)
    _check_data(spec, data)
    if rows is not None:
        data = data.take(rows)
    n = data.n
    r_all, c_all, v_all = [], [], []
    for comp, _, _, col, offset in spec.components():
        qs = _component_qs(comp)
        if isinstance(comp, Longitudinal):
            ids = data.ids[:, col]
            ok = (ids >= 0) & (ids < comp.q)
            if training and not ok.all():
                raise ValueError("unknown subject id at training time")
            r = np.nonzero(ok)[0]
            for k in range(comp.order):
                r_all.append(r)
                c_all.append(offset + k * comp.q + ids[ok])
                v_all.append(data.times[ok] ** k)
            continue
        sub = offset
        for k, q in enumerate(qs):
            ids = data.ids[:, col + k]
            ok = (ids >= 0) & (ids < q)
            if training and not ok.all():
                raise ValueError("unknown level id at training time (feature %d)" % (col + k))
            r = np.nonzero(ok)[0]
            r_all.append(r)
            c_all.append(sub + ids[ok])
            v_all.append(np.ones(r.size))
            sub += q
    if not r_all:
        return as_sparse_design([], [], [], (n, spec.kind.width))
    return as_sparse_design(np.concatenate(r_all), np.concatenate(c_all),
                            np.concatenate(v_all), (n, spec.kind.width))


# --------------------------------------------------------------------------
# D(psi)


def rbf_kernel(locations, sig2b0, sig2b1, other=None):
    """Squared-exponential kernel ``sig2b0 * exp(-|s_i - s_j|^2 / (2 sig2b1))``."""
    if not sig2b0 > 0 or not sig2b1 > 0:
        raise InvalidCovariance("RBF parameters must be positive")
    a = np.atleast_2d(np.asarray(locations, dtype=float))
    b = a if other is None else np.atleast_2d(np.asarray(other, dtype=float))
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("locations must be finite")
    return sig2b0 * np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * sig2b1))


def longitudinal_cov(comp, variances, rhos):
    """``order x order`` covariance of the polynomial terms of one subject."""
    sd = np.sqrt(np.asarray(variances, dtype=float))
    R = np.eye(comp.order)
    for (l, m), r in zip(comp.correlated, rhos):
        R[l, m] = R[m, l] = r
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise InvalidCovariance("correlation matrix of the longitudinal terms is not "
                                "positive definite") from None
    return R * np.outer(sd, sd)


def _longitudinal_cov_derivs(comp, variances, rhos):
    """Derivatives of :func:`longitudinal_cov` in unconstrained coordinates."""
    C = longitudinal_cov(comp, variances, rhos)
    out = []
    for l in range(comp.order):
        dC = np.zeros_like(C)
        dC[l, :] += 0.5 * C[l, :]
        dC[:, l] += 0.5 * C[:, l]
        out.append(dC)
    sd = np.sqrt(np.asarray(variances, dtype=float))
    for (l, m), r in zip(comp.correlated, rhos):
        dC = np.zeros_like(C)
        dC[l, m] = dC[m, l] = (1.0 - r * r) * sd[l] * sd[m]
        out.append(dC)
    return C, out


def _component_D(comp, psi, rhos, coords):
    if isinstance(comp, RandomIntercepts):
        return np.diag(np.full(comp.q, psi[0]))
    if isinstance(comp, MultipleCategorical):
        return np.diag(np.repeat(psi, comp.qs))
    if isinstance(comp, Longitudinal):
        return np.kron(longitudinal_cov(comp, psi, rhos), np.eye(comp.q))
    if isinstance(comp, SpatialRBF):
        if coords is None:
            raise ValueError("spatial D needs location coordinates")
        return rbf_kernel(coords[:comp.q], psi[0], psi[1])
    raise InvalidCovariance("unsupported component %r" % (comp,))


def _component_dD(comp, psi, rhos, coords):
    """Unconstrained derivatives of one component's ``D``, psi first then rhos."""
    if isinstance(comp, RandomIntercepts):
        return [np.diag(np.full(comp.q, psi[0]))]
    if isinstance(comp, MultipleCategorical):
        out = []
        for k, q in enumerate(comp.qs):
            d = np.zeros(comp.width)
            start = sum(comp.qs[:k])
            d[start:start + q] = psi[k]
            out.append(np.diag(d))
        return out
    if isinstance(comp, Longitudinal):
        _, dCs = _longitudinal_cov_derivs(comp, psi, rhos)
        return [np.kron(dC, np.eye(comp.q)) for dC in dCs]
    if isinstance(comp, SpatialRBF):
        pts = coords[:comp.q]
        K = rbf_kernel(pts, psi[0], psi[1])
        d2 = cdist(pts, pts, "sqeuclidean")
        return [K, K * d2 / (2.0 * psi[1])]
    raise InvalidCovariance("unsupported component %r" % (comp,))


def build_D(spec, theta, data=None):
    """Prior covariance of ``b``; block-diagonal across Combined components."""
    spec = as_spec(spec)
    check_theta(spec, theta)
    if spec.learned_g:
        return theta.psi[0] * np.eye(spec.embed_dim)
    coords = None if data is None else data.coords
    blocks = [_component_D(comp, theta.psi[ps], theta.rhos[rs], coords)
              for comp, ps, rs, _, _ in spec.components()]
    return blocks[0] if len(blocks) == 1 else _block_diag(blocks)


def dD_dtheta(spec, theta, index, data=None):
    """``dD / du_index`` for ``index >= 1`` of the unconstrained vector."""
    spec = as_spec(spec)
    check_theta(spec, theta)
    n_psi = len(spec.psi_names)
    if not 1 <= index < spec.n_params:
        raise IndexError("no D-parameter at index %d" % index)
    if spec.learned_g:
        return theta.psi[0] * np.eye(spec.embed_dim)
    coords = None if data is None else data.coords
    blocks, target = [], None
    for comp, ps, rs, _, _ in spec.components():
        width = comp.width
        derivs = _component_dD(comp, theta.psi[ps], theta.rhos[rs], coords)
        local = None
        if ps.start <= index - 1 < ps.stop:
            local = index - 1 - ps.start
        elif rs.start <= index - 1 - n_psi < rs.stop:
            local = (ps.stop - ps.start) + index - 1 - n_psi - rs.start
        if local is not None:
            target = derivs[local]
            blocks.append(target)
        else:
            blocks.append(np.zeros((width, width)))
    return blocks[0] if len(blocks) == 1 else _block_diag(blocks)


def _block_diag(blocks):
    return sla.block_diag(*blocks)


# --------------------------------------------------------------------------
# V(theta)


def _quad_form(gZ, M):
    """``gZ @ M @ gZ.T`` as a dense array for sparse or dense ``gZ``."""
    if sp.issparse(gZ):
        # M is symmetric, so gZ M gZ' = (gZ (gZ M)')'
        return np.asarray(gZ @ np.asarray(gZ @ M).T).T
    gZ = np.asarray(gZ, dtype=float)
    return gZ @ M @ gZ.T


def marginal_V(spec, theta, gZ, noise=True, data=None):
    """``g(Z) D g(Z)' (+ sig2e I)`` for an explicit design matrix."""
    spec = as_spec(spec)
    D = build_D(spec, theta, data)
    if gZ.shape[1] != D.shape[0]:
        raise ValueError("design has %d columns but D is %dx%d"
                         % (gZ.shape[1], D.shape[0], D.shape[0]))
    V = _quad_form(gZ, D)
    V = 0.5 * (V + V.T)
    if noise:
        V[np.diag_indices_from(V)] += theta.sig2e
    return V


def dV_dtheta(spec, theta, gZ, index, data=None):
    """``dV / du_index`` where ``u`` is ``theta.unconstrained``.

    The ``sig2e`` entry is ``sig2e * I`` (structural identity times the
    log-scale chain factor).
    """
    spec = as_spec(spec)
    if not 0 <= index < spec.n_params:
        raise IndexError("parameter index %d out of range (%d parameters)"
                         % (index, spec.n_params))
    if index == 0:
        return theta.sig2e * np.eye(gZ.shape[0])
    dV = _quad_form(gZ, dD_dtheta(spec, theta, index, data))
    return 0.5 * (dV + dV.T)


def _same(ids):
    return (ids[:, None] == ids[None, :]).astype(float)


def batch_covariance(spec, theta, data, G=None, with_grad=True):
    """``V`` and ``[dV/du_k]`` for the rows in ``data``, built from ids directly.

    ``G`` is the learned ``g(Z)`` for these rows when ``spec.learned_g``.
    """
    spec = as_spec(spec)
    check_theta(spec, theta)
    m = data.n
    V = np.zeros((m, m))
    psi_d, rho_d = [], []
    if spec.learned_g:
        if G is None or G.shape != (m, spec.embed_dim):
            raise ValueError("learned g needs G of shape (%d, %d)" % (m, spec.embed_dim))
        GG = theta.psi[0] * (G @ G.T)
        V += GG
        psi_d.append(GG)
    else:
        _check_data(spec, data)
        for comp, ps, rs, col, _ in spec.components():
            psi = theta.psi[ps]
            if isinstance(comp, (RandomIntercepts, MultipleCategorical)):
                for k, s2 in enumerate(psi):
                    term = s2 * _same(data.ids[:, col + k])
                    V += term
                    psi_d.append(term)
            elif isinstance(comp, Longitudinal):
                S = _same(data.ids[:, col])
                T = data.times[:, None] ** np.arange(comp.order)[None, :]
                C, dCs = _longitudinal_cov_derivs(comp, psi, theta.rhos[rs])
                V += S * (T @ C @ T.T)
                npsi = comp.order
                psi_d.extend(S * (T @ dC @ T.T) for dC in dCs[:npsi])
                rho_d.extend(S * (T @ dC @ T.T) for dC in dCs[npsi:])
            elif isinstance(comp, SpatialRBF):
                pts = data.coords[data.ids[:, col]]
                d2 = cdist(pts, pts, "sqeuclidean")
                K = psi[0] * np.exp(-d2 / (2.0 * psi[1]))
                V += K
                psi_d.extend([K, K * d2 / (2.0 * psi[1])])
    V[np.diag_indices(m)] += theta.sig2e
    if not with_grad:
        return V, None
    return V, [theta.sig2e * np.eye(m)] + psi_d + rho_d


# --------------------------------------------------------------------------
# block structure


def _runs(ids):
    """Lengths of runs of equal consecutive values; raises if a value recurs."""
    ids = np.asarray(ids)
    if ids.size == 0:
        return []
    change = np.nonzero(ids[1:] != ids[:-1])[0] + 1
    starts = np.concatenate([[0], change])
    heads = ids[starts]
    if np.unique(heads).size != heads.size:
        raise ValueError("data must be sorted by the primary cluster id")
    return list(np.diff(np.concatenate([starts, [ids.size]])))


def is_block_diagonal(spec, data):
    """Block sizes of ``V`` for cluster-sorted data, or ``None`` if ``V`` has no
    block structure."""
    spec = as_spec(spec)
    kind = spec.kind
    if spec.learned_g:
        return None
    if isinstance(kind, (RandomIntercepts, Longitudinal)):
        return _runs(data.ids[:, 0])
    if isinstance(kind, MultipleCategorical):
        if not kind.nested and len(kind.qs) > 1:
            return None
        top = data.ids[:, 0]
        for k in range(1, len(kind.qs)):
            # nested: every lower-level id belongs to exactly one top-level id
            pairs = np.unique(np.stack([data.ids[:, k], top], axis=1), axis=0)
            if np.unique(pairs[:, 0]).size != pairs.shape[0]:
                raise ValueError("feature %d is not nested in feature 0" % k)
        return _runs(top)
    return None
