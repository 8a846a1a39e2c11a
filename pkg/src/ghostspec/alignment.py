"""Layer alignment between models of different depth.

``posa_align`` is a gap-penalized monotone alignment: every row (layer of the
shallower model) is matched to exactly one column, columns strictly
increase, and each column skipped between two consecutive matches costs
``rho``. Columns skipped before the first or after the last match are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_RHO = 0.002
BASELINE_MODES = ("front_truncate", "back_truncate", "proportional_subsample")
ALIGNMENT_MODES = ("posa", *BASELINE_MODES)


@dataclass(frozen=True)
class AlignmentPath:
    pairs: tuple[tuple[int, int], ...]
    gap_cost: float
    path_mean: float
    total_cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=np.intp)

    def transposed(self) -> AlignmentPath:
        return AlignmentPath(tuple((j, i) for i, j in self.pairs), self.gap_cost, self.path_mean, self.total_cost)


def _as_distance_matrix(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise InputError(f"distance matrix must be non-empty 2-D, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InputError("distance matrix entries must be finite and non-negative")
    return d


def _path_from(d: np.ndarray, pairs: list[tuple[int, int]], rho: float) -> AlignmentPath:
    skipped = sum(j - k - 1 for (_, k), (_, j) in zip(pairs, pairs[1:]))
    gap_cost = skipped * rho
    values = [d[i, j] for i, j in pairs]
    return AlignmentPath(tuple(pairs), gap_cost, float(np.mean(values)), float(sum(values) + gap_cost))


def posa_align(d: np.ndarray, rho: float = DEFAULT_RHO) -> AlignmentPath:
    """Minimum-cost monotone alignment of all rows of ``d`` (N <= M).

    Cost of a path is the sum of its entries plus ``rho`` per column skipped
    between consecutive matches. Ties in the predecessor choice go to the
    earliest column, and ties at the terminal row go to the earliest end.
    ``path_mean`` averages ``d`` over the matched pairs.
    """
    d = _as_distance_matrix(d)
    if rho < 0 or not math.isfinite(rho):
        raise InputError(f"gap penalty must be finite and >= 0, got {rho}")
    n, m = d.shape
    if n > m:
        raise InputError(f"posa_align needs rows <= cols, got {n}x{m}; transpose first")

    cost = np.full((n, m), np.inf)
    back = np.full((n, m), -1, dtype=np.intp)
    cost[0] = d[0]
    for i in range(1, n):
        for j in range(i, m):
            ks = np.arange(i - 1, j)
            cand = cost[i - 1, i - 1 : j] + (j - ks - 1) * rho
            best = int(np.argmin(cand))
            back[i, j] = ks[best]
            cost[i, j] = cand[best] + d[i, j]

    j = int(np.argmin(cost[n - 1, n - 1 :])) + n - 1
    total = float(cost[n - 1, j])
    pairs = [(n - 1, j)]
    for i in range(n - 1, 0, -1):
        j = int(back[i, j])
        pairs.append((i - 1, j))
    pairs.reverse()
    path = _path_from(d, pairs, rho)
    return AlignmentPath(path.pairs, path.gap_cost, path.path_mean, total)


def align_baseline(d: np.ndarray, mode: str) -> AlignmentPath:
    """Fixed, penalty-free correspondences used as ablation baselines.

    ``front_truncate`` pairs ``(i, i)``; ``back_truncate`` pairs
    ``(i, M - N + i)``; ``proportional_subsample`` pairs ``(i, round(i (M-1)/(N-1)))``
    with halves rounded up, and maps a single row to column 0.
    """
    d = _as_distance_matrix(d)
    n, m = d.shape
    if n > m:
        raise InputError(f"align_baseline needs rows <= cols, got {n}x{m}")
    if mode == "front_truncate":
        cols = list(range(n))
    elif mode == "back_truncate":
        cols = [m - n + i for i in range(n)]
    elif mode == "proportional_subsample":
        cols = [0] if n == 1 else [math.floor(i * (m - 1) / (n - 1) + 0.5) for i in range(n)]
    else:
        raise InputError(f"unknown baseline mode {mode!r}; choose from {BASELINE_MODES}")
    pairs = list(zip(range(n), cols))
    values = [d[i, j] for i, j in pairs]
    return AlignmentPath(tuple(pairs), 0.0, float(np.mean(values)), float(sum(values)))


def align(d: np.ndarray, mode: str = "posa", rho: float = DEFAULT_RHO) -> AlignmentPath:
    """Align rows and columns of ``d`` of any shape.

    When ``d`` has more rows than columns the problem is solved on the
    transpose and the path is mapped back, so pairs are always ``(row, col)``.
    """
    d = _as_distance_matrix(d)
    flip = d.shape[0] > d.shape[1]
    work = d.T if flip else d
    if mode == "posa":
        path = posa_align(work, rho)
    elif mode in BASELINE_MODES:
        path = align_baseline(work, mode)
    else:
        raise InputError(f"unknown alignment mode {mode!r}; choose from {ALIGNMENT_MODES}")
    return path.transposed() if flip else path


def trend_distance_matrix(a_qk, a_vo, b_qk, b_vo) -> np.ndarray:
    """``d[i, j] = (|qk_a[i] - qk_b[j]| + |vo_a[i] - vo_b[j]|) / 2``."""
    a_qk, a_vo, b_qk, b_vo = (np.asarray(x, dtype=np.float64) for x in (a_qk, a_vo, b_qk, b_vo))
    return 0.5 * (np.abs(a_qk[:, None] - b_qk[None, :]) + np.abs(a_vo[:, None] - b_vo[None, :]))


def align_trend_sequences(a, b, rho: float = DEFAULT_RHO, mode: str = "posa") -> tuple[np.ndarray, np.ndarray]:
    """Match two trend sequences layer-to-layer; returns two ``(n, 2)`` arrays.

    ``a`` and ``b`` are :class:`~ghostspec.fingerprint.TrendSequences` (or
    anything exposing ``qk_means``/``vo_means``). Each output row is the
    ``(qk mean, vo mean)`` of one matched layer, in path order.
    """
    d = trend_distance_matrix(a.qk_means, a.vo_means, b.qk_means, b.vo_means)
    path = align(d, mode=mode, rho=rho)
    sa, sb = a.samples, b.samples
    return sa[path.rows], sb[path.cols]
