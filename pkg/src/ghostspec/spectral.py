"""Spectral primitives: singular values, effective rank, truncation.

Spectra are plain 1-D ``float64`` arrays sorted in descending order. A
"processed" spectrum is the min-max normalized top-``r`` window of one.
"""

from __future__ import annotations

import math

import numba
import numpy as np
import scipy.linalg

from .errors import InputError, NumericalError, SVDConvergenceError

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12


@numba.njit(cache=True)
def _jacobi_sweep(y, norms, tol):
    """One cyclic-by-row sweep of one-sided Jacobi over the rows of ``y``.

    ``norms`` holds squared row norms and is updated alongside ``y``.
    Returns the largest relative inner product that required a rotation.
    """
    n, m = y.shape
    worst = 0.0
    for p in range(n - 1):
        for q in range(p + 1, n):
            alpha = norms[p]
            beta = norms[q]
            if alpha == 0.0 or beta == 0.0:
                continue
            gamma = 0.0
            for k in range(m):
                gamma += y[p, k] * y[q, k]
            rel = abs(gamma) / math.sqrt(alpha * beta)
            if rel <= tol:
                continue
            worst = max(worst, rel)
            zeta = (beta - alpha) / (2.0 * gamma)
            t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            for k in range(m):
                yp = y[p, k]
                yq = y[q, k]
                y[p, k] = c * yp - s * yq
                y[q, k] = s * yp + c * yq
            norms[p] = alpha - t * gamma
            norms[q] = beta + t * gamma
    return worst


def _jacobi_row_norms(y: np.ndarray, tol: float, max_sweeps: int) -> np.ndarray:
    """Orthogonalize the rows of ``y`` in place; return their final norms."""
    residual = math.inf
    for _ in range(max_sweeps):
        # refresh norms every sweep so incremental updates cannot drift
        norms = np.einsum("ij,ij->i", y, y)
        residual = _jacobi_sweep(y, norms, tol)
        if residual == 0.0:
            return np.sqrt(np.einsum("ij,ij->i", y, y))
    raise SVDConvergenceError(max_sweeps, residual)


def singular_values(
    m: np.ndarray, tol: float = ROTATION_TOL, max_sweeps: int = MAX_SWEEPS
) -> np.ndarray:
    """Singular values of a dense matrix, descending.

    The matrix is reduced to a square triangular factor by column-pivoted QR
    (which leaves the singular values unchanged and speeds up convergence),
    then orthogonalized with cyclic one-sided Jacobi on the smaller dimension.
    No singular vectors are formed.

    Raises:
        InputError: if ``m`` is not a non-empty 2-D array.
        NumericalError: if ``m`` holds NaN or Inf.
        SVDConvergenceError: if rotations still exceed ``tol`` after
            ``max_sweeps`` sweeps.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise InputError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains NaN or Inf entries")
    if a.shape[0] < a.shape[1]:
        a = a.T
    r = scipy.linalg.qr(a, mode="r", pivoting=True, check_finite=False)[0]
    n = a.shape[1]
    # rows of R are the vectors to orthogonalize (Jacobi on R^T)
    y = np.array(r[:n, :n], order="C")
    sv = _jacobi_row_norms(y, tol, max_sweeps)
    return np.sort(sv)[::-1].copy()


def effective_rank(s: np.ndarray) -> float:
    """Exponential of the Shannon entropy of the sum-normalized spectrum.

    Zero entries contribute nothing, so appending zeros never changes the
    result. The value lies in ``[1, len(s)]``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InputError("effective_rank expects a non-empty 1-D spectrum")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InputError("spectrum must be finite and non-negative")
    total = s.sum()
    if total <= 0:
        raise InputError("null spectrum: no strictly positive singular value")
    p = s / total
    p = p[p > 0]  # subnormal entries can underflow to zero here
    entropy = -float(np.sum(p * np.log(p)))
    return min(max(math.exp(entropy), 1.0), float(s.size))


def rank_window(eff_rank: float) -> int:
    """Integer truncation depth for a (possibly fractional) effective rank."""
    return max(1, int(math.floor(eff_rank)))


def min_max_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def truncate_normalize(s: np.ndarray, r: int) -> np.ndarray:
    """Keep the top ``r`` values of a descending spectrum and min-max scale.

    Constant windows map to all zeros.
    """
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= r <= s.size:
        raise InputError(f"truncation rank {r} outside [1, {s.size}]")
    return min_max_normalize(s[:r])


def spectral_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference of two processed spectra of equal rank."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"rank mismatch: {a.size} vs {b.size}")
    diff = a - b
    return float(np.dot(diff, diff) / a.size)


def pair_distance(sa: np.ndarray, sb: np.ndarray, rank_a: float, rank_b: float) -> float:
    """Spectral MSE after truncating both spectra to their shared rank window."""
    r = rank_window(min(rank_a, rank_b))
    r = min(r, sa.size, sb.size)
    return spectral_mse(truncate_normalize(sa, r), truncate_normalize(sb, r))
