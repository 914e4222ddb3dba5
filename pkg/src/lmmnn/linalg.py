"""Dense and block-diagonal linear algebra used by the likelihood and BLUP code.

Everything here is float64. Factorizations go through LAPACK (via scipy);
this module adds the jitter ladder, the block-diagonal solver and a
row-wise sparse design type.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)
SYMMETRY_TOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even after adding jitter."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular ``L`` with ``A + jitter * I = L @ L.T``."""

    L: np.ndarray
    jitter: float = 0.0

    @property
    def n(self):
        return self.L.shape[0]


def as_sparse_design(rows, cols, values, shape):
    """Build a row-compressed design matrix from coordinate triplets.

    CSR keeps each observation's (column, value) pairs contiguous, which
    is the access pattern of every consumer (batch slicing, residual
    products).
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= shape[1]):
        raise ValueError("column index out of range for design of width %d" % shape[1])
    return sp.csr_matrix((np.asarray(values, dtype=float), (rows, cols)), shape=shape)


def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix, got shape %s" % (A.shape,))
    diff = np.abs(A - A.T)
    if np.any(diff > SYMMETRY_TOL * np.maximum(1.0, np.abs(A))):
        raise ValueError("matrix is not symmetric within tolerance")
    return A


def cholesky(A, ladder=JITTER_LADDER):
    """Cholesky factor of a symmetric matrix with an escalating jitter ladder.

    Jitter levels are relative to the mean diagonal entry. Raises
    :class:`NotPositiveDefinite` once the ladder is exhausted.
    """
    A = _check_symmetric(A)
    n = A.shape[0]
    scale = float(np.mean(np.diag(A))) if n else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    for level in ladder:
        jitter = level * scale
        M = A if jitter == 0.0 else A + jitter * np.eye(n)
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return CholeskyFactor(L, jitter)
    raise NotPositiveDefinite("matrix of size %d is not positive definite (jitter up to %g)"
                              % (n, ladder[-1] * scale))


def solve(factor, B):
    """Solve ``A X = B`` given the Cholesky factor of ``A``."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != factor.n:
        raise ValueError("dimension mismatch: factor is %d, right-hand side has %d rows"
                         % (factor.n, B.shape[0]))
    return sla.cho_solve((factor.L, True), B, check_finite=False)


def inverse(factor):
    return solve(factor, np.eye(factor.n))


def logdet(factor):
    return 2.0 * float(np.sum(np.log(np.diag(factor.L))))


def block_solve(blocks, e):
    """Solve a block-diagonal SPD system one block at a time."""
    e = np.asarray(e, dtype=float)
    sizes = [np.shape(b)[0] for b in blocks]
    if sum(sizes) != e.shape[0]:
        raise ValueError("block sizes sum to %d but right-hand side has length %d"
                         % (sum(sizes), e.shape[0]))
    out = np.empty_like(e)
    start = 0
    for k, (block, size) in enumerate(zip(blocks, sizes)):
        try:
            factor = cholesky(block)
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite("block %d: %s" % (k, err), block=k) from err
        out[start:start + size] = solve(factor, e[start:start + size])
        start += size
    return out


def symmetric_eigvalsh(A):
    """Eigenvalues of a symmetric matrix in descending order."""
    return np.linalg.eigvalsh(_check_symmetric(A))[::-1]
