"""Eigenvalue spectra of categorical kernels and power-law decay fits.

For one categorical feature with cluster sizes ``n_j`` the kernel
``sigma2 Z Z'`` is, after sorting rows by cluster, block-diagonal with
constant blocks ``sigma2 J_{n_j}``. Each block has rank one, so the
spectrum is ``{sigma2 n_j}`` plus ``n - q`` zeros.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .linalg import symmetric_eigvalsh

DENSE_CAP = 2000
CROSSCHECK_CAP = 200


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    C: Optional[float] = None
    p: Optional[float] = None
    max_dev: Optional[float] = None

    def fitted(self):
        """``C i^{-p}`` at ``i = 1..n`` (NaN when no fit is available)."""
        i = np.arange(1, self.eigenvalues.size + 1, dtype=float)
        if self.C is None:
            return np.full(i.size, np.nan)
        return self.C * i ** (-self.p)

    def to_frame(self):
        return pd.DataFrame({"index": np.arange(1, self.eigenvalues.size + 1),
                             "eigenvalue": self.eigenvalues,
                             "fitted_value": self.fitted()})


def kernel_matrix(labels, sigma2):
    labels = np.asarray(labels)
    return sigma2 * (labels[:, None] == labels[None, :]).astype(float)


def labels_from_sizes(sizes):
    return np.repeat(np.arange(len(sizes)), sizes)


def closed_form_spectrum(sizes, sigma2):
    sizes = np.asarray(sizes)
    if np.any(sizes <= 0):
        raise ValueError("cluster sizes must be positive")
    lam = np.concatenate([sigma2 * sizes.astype(float), np.zeros(int(sizes.sum()) - sizes.size)])
    return np.sort(lam)[::-1]


def categorical_spectrum(sizes, sigma2, window=None, crosscheck=True):
    """Closed-form spectrum of ``sigma2 Z Z'``, fitted with ``C i^{-p}``.

    For ``n <= 200`` the closed form is compared with a dense eigensolve and
    the largest gap is stored in ``max_dev``.
    """
    lam = closed_form_spectrum(sizes, sigma2)
    dev = None
    if crosscheck and lam.size <= CROSSCHECK_CAP:
        dense = symmetric_eigvalsh(kernel_matrix(labels_from_sizes(sizes), sigma2))
        dev = float(np.max(np.abs(dense - lam)))
    C = p = None
    if sigma2 > 0 and len(sizes) >= 3:
        C, p = fit_decay(lam, window or (1, len(sizes)))
    return SpectrumReport(lam, C, p, dev)


def fit_decay(eigenvalues, window=None):
    """Least-squares fit of ``log lam_i = log C - p log i`` over a 1-based window.

    The default window is every positive eigenvalue. Returns ``(C, p)``.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    lo, hi = window or (1, lam.size)
    i = np.arange(lo, hi + 1)
    vals = lam[lo - 1:hi]
    pos = vals > 0
    if pos.sum() < 3:
        raise ValueError("need at least 3 positive eigenvalues in the fit window")
    A = np.stack([np.ones(pos.sum()), -np.log(i[pos])], axis=1)
    (logC, p), *_ = np.linalg.lstsq(A, np.log(vals[pos]), rcond=None)
    return float(np.exp(logC)), float(p)


def summed_spectrum(kernels, sigma2s, sigma2e, window=None, as_labels=False):
    """Dense spectrum of ``sum_l sigma2_l Z_l Z_l' + sigma2e I``.

    ``kernels`` holds one list of cluster sizes per categorical feature
    (rows taken in cluster order), or one per-row label vector per feature
    when ``as_labels`` is true. All must describe the same ``n`` rows.
    """
    labels = [np.asarray(k) if as_labels else labels_from_sizes(k) for k in kernels]
    n = {lab.size for lab in labels}
    if len(n) != 1:
        raise ValueError("all kernels must have the same number of rows")
    n = n.pop()
    if n > DENSE_CAP:
        raise ValueError("n=%d exceeds the dense eigensolve cap of %d" % (n, DENSE_CAP))
    if len(sigma2s) != len(labels):
        raise ValueError("one sigma2 per kernel required")
    V = sigma2e * np.eye(n)
    for lab, s2 in zip(labels, sigma2s):
        V += kernel_matrix(lab, s2)
    lam = symmetric_eigvalsh(V)
    C = p = None
    try:
        C, p = fit_decay(lam, window)
    except ValueError:
        pass
    return SpectrumReport(lam, C, p)

