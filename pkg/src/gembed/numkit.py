"""Dense float64 linear-algebra helpers used throughout the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; vectors
are 1-D arrays. Every function checks shapes up front and raises
:class:`~gembed.errors.InputError` instead of broadcasting silently.
"""

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, NotPositiveDefiniteError, NumericalError

DEFAULT_EPSILON = 1e-10


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def as_vector(a, name="vector"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits):
    """Row-wise softmax with the usual max shift.

    Accepts a 2-D array, or a 1-D array treated as a single row.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise InputError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits):
    z = np.asarray(logits, dtype=np.float64)
    check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cholesky(spd):
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefiniteError carrying the index of the first
    non-positive pivot.
    """
    a = as_matrix(spd, "spd")
    n = a.shape[0]
    if a.shape[1] != n:
        raise InputError(f"cholesky needs a square matrix, got {a.shape}")
    check_finite(a, "spd")
    L = np.zeros_like(a)
    for j in range(n):
        row = L[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        d = np.sqrt(pivot)
        L[j, j] = d
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / d
    return L


def tri_solve(L, b, lower=True, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b`` with ``trans``) for triangular L."""
    return solve_triangular(L, b, lower=lower, trans="T" if trans else "N")


def sym_eig(sym):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Returns ``(values, vectors)`` with ``sym @ vectors[:, i] == values[i] * vectors[:, i]``.
    """
    a = as_matrix(sym, "sym")
    if a.shape[0] != a.shape[1]:
        raise InputError(f"sym_eig needs a square matrix, got {a.shape}")
    check_finite(a, "sym")
    a = 0.5 * (a + a.T)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition did not converge: {exc}") from exc
    order = np.argsort(w, kind="stable")[::-1]
    return w[order], v[:, order]


def rowwise_mean_std(frames, epsilon=DEFAULT_EPSILON):
    """Per-column mean and ``sqrt(population variance + epsilon)``."""
    x = as_matrix(frames, "frames")
    if x.shape[0] == 0:
        raise InputError("rowwise_mean_std needs at least one row")
    if epsilon < 0:
        raise InputError("epsilon must be non-negative")
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, np.sqrt(var + epsilon)
