"""Compiled GEMV loops.

Every kernel produces y[i] as a left-to-right sum over the selected columns in
ascending column order, starting from 0.0. The column kernels unroll four
columns per pass over the output but keep that association, so all kernels
agree bitwise for the same column set regardless of storage layout.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def gather_columns(w, idx, vals, out):
    n = w.shape[0]
    for i in range(n):
        out[i] = 0.0
    m = idx.shape[0]
    t = 0
    while t + 4 <= m:
        j0 = idx[t]
        j1 = idx[t + 1]
        j2 = idx[t + 2]
        j3 = idx[t + 3]
        v0 = vals[t]
        v1 = vals[t + 1]
        v2 = vals[t + 2]
        v3 = vals[t + 3]
        for i in range(n):
            out[i] = (((out[i] + w[i, j0] * v0) + w[i, j1] * v1) + w[i, j2] * v2) + w[i, j3] * v3
        t += 4
    while t < m:
        j = idx[t]
        v = vals[t]
        for i in range(n):
            out[i] = out[i] + w[i, j] * v
        t += 1
    return out


@numba.njit(cache=True)
def dense_columns(w, x, out):
    n = w.shape[0]
    m = w.shape[1]
    for i in range(n):
        out[i] = 0.0
    j = 0
    while j + 4 <= m:
        v0 = x[j]
        v1 = x[j + 1]
        v2 = x[j + 2]
        v3 = x[j + 3]
        for i in range(n):
            out[i] = (((out[i] + w[i, j] * v0) + w[i, j + 1] * v1) + w[i, j + 2] * v2) + w[i, j + 3] * v3
        j += 4
    while j < m:
        v = x[j]
        for i in range(n):
            out[i] = out[i] + w[i, j] * v
        j += 1
    return out


@numba.njit(cache=True)
def dense_rows(w, x, out):
    n = w.shape[0]
    m = w.shape[1]
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc = acc + w[i, j] * x[j]
        out[i] = acc
    return out


def warmup():
    """Compile the kernels for float64 so first-call latency stays out of timings."""
    w = np.zeros((4, 5), order="F")
    x = np.zeros(5)
    out = np.empty(4)
    gather_columns(w, np.arange(5, dtype=np.int64), x, out)
    dense_columns(w, x, out)
    dense_rows(np.ascontiguousarray(w), x, out)
