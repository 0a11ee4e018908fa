"""Unscrambled Sobol sequence with Joe-Kuo direction numbers.

Point ``i`` is the XOR of the direction numbers selected by the Gray code of
``i``, so any contiguous block ``[skip, skip + n)`` can be produced directly
without replaying the sequence.
"""
from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np

BITS = 32
_TABLE = Path(__file__).parent / "data" / "sobol_directions.json"


@lru_cache(maxsize=1)
def _table():
    with open(_TABLE) as fh:
        return json.load(fh)["dims"]


def max_dimension() -> int:
    return len(_table()) + 1


def direction_numbers(dim: int) -> np.ndarray:
    """Integer direction numbers V[d, k] = m_{k+1} << (BITS - k - 1)."""
    if dim > max_dimension():
        raise ValueError(f"Sobol dimension {dim} exceeds table size {max_dimension()}")
    V = np.zeros((dim, BITS), dtype=np.uint64)
    V[0] = [1 << (BITS - k - 1) for k in range(BITS)]
    for d in range(1, dim):
        entry = _table()[d - 1]
        poly, m0 = entry["poly"], entry["m"]
        deg = poly.bit_length() - 1
        m = list(m0)
        for j in range(deg, BITS):
            new = m[j - deg] ^ (m[j - deg] << deg)
            for k in range(1, deg):
                if (poly >> (deg - k)) & 1:
                    new ^= m[j - k] << k
            m.append(new)
        V[d] = [m[k] << (BITS - k - 1) for k in range(BITS)]
    return V


def sobol_points(n: int, dim: int, skip: int = 1) -> np.ndarray:
    """Points ``skip .. skip+n-1`` of the ``dim``-dimensional sequence in [0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if skip < 0 or skip + n > 2**BITS:
        raise ValueError("index range outside the sequence period")
    V = direction_numbers(dim)
    idx = np.arange(skip, skip + n, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    X = np.zeros((n, dim), dtype=np.uint64)
    for k in range(BITS):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        if bit.any():
            X[bit] ^= V[:, k]
    return X.astype(np.float64) / float(2**BITS)


def scaled_sobol(n: int, lo, hi, skip: int = 1) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + sobol_points(n, len(lo), skip) * (hi - lo)
