"""Independent reference implementations used as test oracles.

Nothing here imports from ``ghostspec``; each routine follows the textbook
definition directly and trades speed for obviousness.
"""

from __future__ import annotations

import itertools
import json
import math
import struct

import numpy as np


def singular_values_eigh(m: np.ndarray) -> np.ndarray:
    """Square roots of the eigenvalues of the smaller Gram matrix, descending."""
    m = np.asarray(m, dtype=np.float64)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    w = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(w, 0.0, None))[::-1]


def effective_rank_direct(s) -> float:
    total = sum(s)
    h = 0.0
    for v in s:
        if v > 0:
            p = v / total
            h -= p * math.log(p)
    return math.exp(h)


def monotone_paths(n: int, m: int):
    """Every strictly increasing column choice for rows 0..n-1."""
    return itertools.combinations(range(m), n)


def posa_brute_force(d: np.ndarray, rho: float) -> tuple[float, tuple[int, ...]]:
    """Minimum path cost by enumeration.

    Cost accumulates in path order as ``((c + gap) + d)`` so that float
    rounding matches a left-to-right dynamic program exactly. The first
    minimum in lexicographic column order is returned.
    """
    n, m = d.shape
    best = (math.inf, ())
    for cols in monotone_paths(n, m):
        cost = d[0, cols[0]]
        for i in range(1, n):
            cost = (cost + (cols[i] - cols[i - 1] - 1) * rho) + d[i, cols[i]]
        if cost < best[0]:
            best = (cost, cols)
    return best


def dcor_direct(x, y) -> float:
    """Distance correlation by explicit double loops over sample pairs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64).T).T
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    n = len(x)

    def centred(z):
        a = [[math.dist(z[i], z[j]) for j in range(n)] for i in range(n)]
        row = [sum(r) / n for r in a]
        col = [sum(a[i][j] for i in range(n)) / n for j in range(n)]
        grand = sum(row) / n
        return [[a[i][j] - row[i] - col[j] + grand for j in range(n)] for i in range(n)]

    a, b = centred(x), centred(y)
    cov = sum(a[i][j] * b[i][j] for i in range(n) for j in range(n)) / n**2
    vx = sum(a[i][j] ** 2 for i in range(n) for j in range(n)) / n**2
    vy = sum(b[i][j] ** 2 for i in range(n) for j in range(n)) / n**2
    if vx <= 0 or vy <= 0:
        return 0.0
    return math.sqrt(max(cov, 0.0) / math.sqrt(vx * vy))


def f1_brute_force(scores, labels) -> float:
    """Best F1 over every cut ``score > t`` for t in {0, 1} and each score."""
    best = 0.0
    for t in set(scores) | {0.0, 1.0}:
        tp = sum(1 for s, y in zip(scores, labels) if s > t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s > t and not y)
        fn = sum(1 for s, y in zip(scores, labels) if s <= t and y)
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        best = max(best, f1)
    return best


_FORMATS = {"F64": "d", "F32": "f", "F16": "e"}


def write_safetensors_by_hand(path, tensors: dict[str, tuple[str, list[int], list[float]]]) -> None:
    """Write a single-file checkpoint with ``struct``; values given flat, row-major."""
    header, payloads, offset = {}, [], 0
    for name, (dtype, shape, values) in tensors.items():
        if dtype == "BF16":
            blob = b"".join(struct.pack("<H", struct.unpack("<I", struct.pack("<f", v))[0] >> 16) for v in values)
        else:
            blob = struct.pack("<" + _FORMATS[dtype] * len(values), *values)
        header[name] = {"dtype": dtype, "shape": shape, "data_offsets": [offset, offset + len(blob)]}
        payloads.append(blob)
        offset += len(blob)
    text = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(b"".join(payloads))
